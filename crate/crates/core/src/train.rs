//! Full-batch training: mask, encode, propagate, decode, reconstruct, step.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adam::{AdamConfig, AdamError, AdamState};
use crate::config::{Config, ConfigError};
use crate::hetgraph::{GraphError, HeteroGraph, MetaPathGraph};
use crate::loss::{self, LossError, LossReport, PathLoss};
use crate::masking::{self, FeatureMask, MaskError, MaskPlan, MaskStrategy};
use crate::matrix::Matrix;
use crate::model::{ForwardInput, Model, ModelError};
use crate::params::{ParamStore, ParamVars, ParamsError};
use crate::tape::{Tape, TapeError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("epoch {epoch}: {component}: {source}")]
    Epoch {
        epoch: usize,
        component: String,
        source: Box<TrainError>,
    },
    #[error("{component}: {source}")]
    Component {
        component: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// splitmix64 of `base + salt`, used to derive independent seeds.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_INIT: u64 = 0x1417;
const SALT_MASK: u64 = 0x3A5C;

/// Graph-derived inputs shared by every epoch.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: Model,
    pub x_tar: Matrix,
    pub graphs: Vec<MetaPathGraph>,
    pub dense: Vec<Matrix>,
}

impl Prepared {
    pub fn new(g: &HeteroGraph, config: &Config) -> Result<Self> {
        config.validate()?;
        let model = Model::new(g, config)?;
        let graphs = g
            .metapaths
            .iter()
            .map(|s| g.build_metapath_adjacency(s, config.self_loops))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let dense = graphs.iter().map(MetaPathGraph::dense).collect();
        Ok(Self {
            model,
            x_tar: g.target_features().expect("checked by Model::new").clone(),
            graphs,
            dense,
        })
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config().seed, SALT_INIT));
        let mut p = self.model.init_params(&mut rng);
        if self.config().precision == crate::tape::Precision::F32 {
            p.round_to_f32();
        }
        p
    }

    /// Edge and feature masks for one round. `attention` is per-path
    /// last-layer attention, if available.
    pub fn draw_plan(&self, seed: u64, attention: Option<&[Vec<f64>]>) -> Result<MaskPlan> {
        let c = self.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::with_capacity(self.graphs.len());
        for (k, g) in self.graphs.iter().enumerate() {
            let att = attention.map(|a| a[k].as_slice());
            edges.push(masking::mask_edges(
                c.mask_strategy,
                g,
                att,
                c.mask_rate,
                c.inverse_softmax_c,
                &mut rng,
            )?);
        }
        let fm = masking::mask_node_features(
            self.x_tar.rows(),
            self.x_tar.cols(),
            c.node_mask_rate,
            c.attr_mask_rate,
            &mut rng,
        )?;
        Ok(MaskPlan {
            strategy: c.mask_strategy,
            mask_rate: c.mask_rate,
            node_rate: c.node_mask_rate,
            attr_rate: c.attr_mask_rate,
            seed,
            edges,
            masked_nodes: fm.masked_nodes,
            masked_attributes: fm.masked_attributes,
        })
    }

    /// Materialize a plan into model inputs.
    pub fn batch(&self, plan: &MaskPlan) -> Result<Batch> {
        let graphs = self
            .graphs
            .iter()
            .zip(&plan.edges)
            .map(|(g, m)| masking::apply_mask(g, m))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let fm = FeatureMask {
            masked_nodes: plan.masked_nodes.clone(),
            masked_attributes: plan.masked_attributes.clone(),
        };
        Ok(Batch {
            x_masked: fm.zeroed(&self.x_tar),
            mask_rows: fm.row_indicator(self.x_tar.rows()),
            graphs,
            masked_nodes: plan.masked_nodes.clone(),
        })
    }

    /// Inputs with nothing masked.
    pub fn unmasked_batch(&self) -> Batch {
        Batch {
            x_masked: self.x_tar.clone(),
            mask_rows: Matrix::zeros(self.x_tar.rows(), 1),
            graphs: self.graphs.clone(),
            masked_nodes: Vec::new(),
        }
    }

    /// Record the total loss for one batch.
    pub fn record_loss(&self, tape: &mut Tape, p: &ParamVars, batch: &Batch) -> Result<LossVars> {
        let c = self.config();
        let input = ForwardInput {
            x_tar: &batch.x_masked,
            mask_rows: Some(&batch.mask_rows),
            graphs: &batch.graphs,
        };
        let fwd = self.model.forward(tape, p, &input).map_err(|e| component("forward", e.into()))?;
        let x = tape.constant(self.x_tar.clone());
        let l_feat = loss::feature_loss(
            tape,
            x,
            fwd.decoded,
            c.loss_scope,
            &batch.masked_nodes,
            c.gamma_feat,
            c.strict,
        )
        .map_err(|e| component("L_feat", e.into()))?;
        let a_rec = loss::reconstruct_adjacency(tape, fwd.decoded)
            .map_err(|e| component("adjacency", e.into()))?;
        let mut per_path = Vec::with_capacity(self.dense.len());
        for (k, a) in self.dense.iter().enumerate() {
            let name = &self.model.paths[k].name;
            per_path.push(
                loss::metapath_loss(tape, a, a_rec, c.gamma_mp, c.strict)
                    .map_err(|e| component(&format!("L_mp[{name}]"), e.into()))?,
            );
        }
        let l_mp = loss::combined_mp_loss(tape, &per_path, fwd.alpha)
            .map_err(|e| component("L_mp", e.into()))?;
        let total = loss::total_loss(tape, l_feat, l_mp, c.lambda_feat, c.lambda_mp)
            .map_err(|e| component("L_total", e.into()))?;
        Ok(LossVars {
            l_feat,
            per_path,
            l_mp,
            total,
            alpha: fwd.alpha,
            attention: fwd.attention,
        })
    }
}

fn component(name: &str, e: TrainError) -> TrainError {
    TrainError::Component {
        component: name.to_owned(),
        source: Box::new(e),
    }
}

/// Masked inputs for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_masked: Matrix,
    pub mask_rows: Matrix,
    pub graphs: Vec<MetaPathGraph>,
    pub masked_nodes: Vec<usize>,
}

pub struct LossVars {
    pub l_feat: Var,
    pub per_path: Vec<Var>,
    pub l_mp: Var,
    pub total: Var,
    pub alpha: Var,
    pub attention: Vec<Vec<f64>>,
}

impl LossVars {
    pub fn report(&self, tape: &Tape, epoch: usize, names: &[String]) -> LossReport {
        let s = |v: Var| tape.value(v).get(0, 0);
        let alpha = tape.value(self.alpha);
        LossReport {
            epoch,
            l_feat: s(self.l_feat),
            metapaths: names
                .iter()
                .zip(&self.per_path)
                .enumerate()
                .map(|(k, (n, &l))| PathLoss {
                    metapath: n.clone(),
                    loss: s(l),
                    alpha: alpha.get(k, 0),
                })
                .collect(),
            l_mp: s(self.l_mp),
            l_total: s(self.total),
            wall_time_ms: None,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub log: Vec<LossReport>,
}

/// Train from a fresh initialization. `on_epoch` sees each epoch's report.
pub fn train(prep: &Prepared, mut on_epoch: impl FnMut(&LossReport)) -> Result<TrainOutput> {
    let c = prep.config().clone();
    let mut params = prep.init_params();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        },
        params.shapes(),
    );
    let names: Vec<String> = prep.model.paths.iter().map(|p| p.name.clone()).collect();
    let mut log = Vec::with_capacity(c.epochs);
    let start = std::time::Instant::now();
    for epoch in 0..c.epochs {
        let at = |component: &str, e: TrainError| TrainError::Epoch {
            epoch,
            component: component.to_owned(),
            source: Box::new(e),
        };
        let attention = if c.mask_strategy == MaskStrategy::Attention && epoch > 0 {
            Some(
                prep.model
                    .edge_attention(&params, &prep.x_tar, &prep.graphs)
                    .map_err(|e| at("attention", e.into()))?,
            )
        } else {
            None
        };
        let plan = prep
            .draw_plan(derive_seed(c.seed ^ SALT_MASK, epoch as u64), attention.as_deref())
            .map_err(|e| at("masking", e))?;
        let batch = prep.batch(&plan).map_err(|e| at("masking", e))?;
        let mut tape = Tape::new(c.precision);
        let p = params.bind(&mut tape);
        let lv = prep.record_loss(&mut tape, &p, &batch).map_err(|e| match e {
            TrainError::Component { component, source } => TrainError::Epoch {
                epoch,
                component,
                source,
            },
            other => at("loss", other),
        })?;
        let mut report = lv.report(&tape, epoch, &names);
        if c.log_wall_time {
            report.wall_time_ms = Some(start.elapsed().as_millis() as u64);
        }
        let vars = p.vars().to_vec();
        let mut grads = tape.backward(lv.total).map_err(|e| at("backward", e.into()))?;
        let grads: Vec<Matrix> = vars
            .iter()
            .zip(params.values())
            .map(|(&v, m)| grads.take(v).unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
            .collect();
        if let Some(k) = grads.iter().position(|g| !g.all_finite()) {
            return Err(at(
                "backward",
                TapeError::NonFinite {
                    op: "gradient",
                }
                .into(),
            )
            .with_param(&params.names()[k]));
        }
        adam.step(params.values_mut(), &grads).map_err(|e| at("adam", e.into()))?;
        if c.precision == crate::tape::Precision::F32 {
            params.round_to_f32();
        }
        if let Some(k) = params.values().iter().position(|m| !m.all_finite()) {
            return Err(at("adam", TapeError::NonFinite { op: "update" }.into())
                .with_param(&params.names()[k]));
        }
        on_epoch(&report);
        log.push(report);
    }
    Ok(TrainOutput { params, log })
}

impl TrainError {
    fn with_param(self, name: &str) -> Self {
        match self {
            TrainError::Epoch {
                epoch,
                component,
                source,
            } => TrainError::Epoch {
                epoch,
                component: format!("{component} ({name})"),
                source,
            },
            other => other,
        }
    }
}

/// Serialize a log as JSON lines.
pub fn log_to_jsonl(log: &[LossReport]) -> String {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r).expect("report serializes"));
        s.push('\n');
    }
    s
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `params.bin` and `config.json` into `dir`.
pub fn write_checkpoint(dir: &Path, params: &ParamStore, config: &Config) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join("params.bin");
    fs::write(&p, params.encode()).map_err(io_err(&p))?;
    let c = dir.join("config.json");
    fs::write(&c, config.to_json()).map_err(io_err(&c))?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(Config, ParamStore)> {
    let c = dir.join("config.json");
    let config = Config::from_json(&fs::read_to_string(&c).map_err(io_err(&c))?)?;
    let p = dir.join("params.bin");
    let params = ParamStore::decode(&fs::read(&p).map_err(io_err(&p))?)?;
    Ok((config, params))
}

/// Embeddings of a checkpoint on `g`: unmasked forward, enhanced target
/// embeddings.
pub fn embed(g: &HeteroGraph, config: &Config, stored: &ParamStore) -> Result<Matrix> {
    let prep = Prepared::new(g, config)?;
    let mut params = prep.model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    params.load_from(stored)?;
    Ok(prep.model.embed(&params, &prep.x_tar, &prep.graphs)?)
}
