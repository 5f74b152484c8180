//! Parameter storage: named float64 tensors organized into the eight
//! parameter groups the curriculum trains, freezes, and checkpoints as
//! units. Binding a store onto a graph yields leaf variables; gradients
//! flow back into the store through one clipped Adam step per group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::num::{adam_step, clip_global_norm, AdamHyper, AdamState, Graph, Tensor, Var};
use crate::rng::{self, purpose};
use crate::{Error, Result};

/// The eight parameter groups, in their canonical order.
pub const GROUPS: [&str; 8] =
    ["s2f", "shared", "rnnt", "text", "duration", "decoder", "vae", "vocoder"];

/// Architecture hyperparameters. Defaults are the desk-scale preset; the
/// documented large preset (hidden 768, 6+18 encoder layers, 12 text layers,
/// 6 decoder layers) is far outside desk budgets and exists only as a
/// comment here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub s2f_layers: usize,
    pub shared_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub hidden_dim: usize,
    pub d_feat: usize,
    pub d_sig: usize,
    pub vae_dim: usize,
    /// Embedding rows including the reserved unknown row 0.
    pub n_langs: usize,
    /// Embedding rows including the reserved unknown row 0.
    pub n_spks: usize,
    pub cfg_dropout_prob: f64,
    /// K: number of iterative feature-decoder refinements.
    pub refinements: usize,
    /// Codebook size of the frozen masked-prediction quantizer; sizes the
    /// pretraining prediction heads.
    pub bestrq_codes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            s2f_layers: 1,
            shared_layers: 2,
            text_layers: 1,
            decoder_layers: 1,
            hidden_dim: 64,
            d_feat: 8,
            d_sig: 16,
            vae_dim: 8,
            n_langs: 13,
            n_spks: 49,
            cfg_dropout_prob: 0.1,
            refinements: 2,
            bestrq_codes: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: &[(&str, usize)] = &[
            ("s2f_layers", self.s2f_layers),
            ("shared_layers", self.shared_layers),
            ("text_layers", self.text_layers),
            ("decoder_layers", self.decoder_layers),
            ("hidden_dim", self.hidden_dim),
            ("d_feat", self.d_feat),
            ("d_sig", self.d_sig),
            ("vae_dim", self.vae_dim),
            ("n_langs", self.n_langs),
            ("n_spks", self.n_spks),
            ("refinements", self.refinements),
            ("bestrq_codes", self.bestrq_codes),
        ];
        for &(name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout_prob) {
            return Err(Error::Config(format!(
                "cfg_dropout_prob must be in [0, 1], got {}",
                self.cfg_dropout_prob
            )));
        }
        // Token encodings are byte embedding ++ language (8) ++ speaker (8).
        if self.hidden_dim <= COND_DIM * 2 {
            return Err(Error::Config(format!(
                "hidden_dim must exceed {} to leave room for conditioning embeddings",
                COND_DIM * 2
            )));
        }
        Ok(())
    }
}

/// Width of each of the language and speaker conditioning embeddings.
pub const COND_DIM: usize = 8;

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct ParamPlan {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn plan_param(plan: &mut Vec<ParamPlan>, name: String, shape: Vec<usize>, init: Init) {
    plan.push(ParamPlan { name, shape, init });
}

fn plan_linear(plan: &mut Vec<ParamPlan>, prefix: &str, rows: usize, cols: usize) {
    let std = 1.0 / (rows as f64).sqrt();
    plan_param(plan, format!("{prefix}_w"), vec![rows, cols], Init::Normal(std));
    plan_param(plan, format!("{prefix}_b"), vec![cols], Init::Zeros);
}

fn plan_block(plan: &mut Vec<ParamPlan>, prefix: &str, h: usize) {
    let std = 1.0 / (h as f64).sqrt();
    for ln in ["ln1", "ln2", "ln3"] {
        plan_param(plan, format!("{prefix}/{ln}_g"), vec![h], Init::Ones);
        plan_param(plan, format!("{prefix}/{ln}_b"), vec![h], Init::Zeros);
    }
    for w in ["attn_wq", "attn_wk", "attn_wv", "attn_wo"] {
        plan_param(plan, format!("{prefix}/{w}"), vec![h, h], Init::Normal(std));
    }
    plan_param(plan, format!("{prefix}/conv_w"), vec![3, h], Init::Normal(0.3));
    plan_param(plan, format!("{prefix}/conv_b"), vec![h], Init::Zeros);
    plan_linear(plan, &format!("{prefix}/ff1"), h, 2 * h);
    plan_linear(plan, &format!("{prefix}/ff2"), 2 * h, h);
}

/// Every parameter of the model, in registration order, grouped by the
/// prefix before the first `/`.
fn param_plan(mc: &ModelConfig) -> Vec<ParamPlan> {
    let h = mc.hidden_dim;
    let mut p = Vec::new();

    // s2f: signal pairs -> features at half rate.
    plan_linear(&mut p, "s2f/in", 2 * mc.d_sig, h);
    for i in 0..mc.s2f_layers {
        plan_block(&mut p, &format!("s2f/b{i}"), h);
    }
    plan_linear(&mut p, "s2f/out", h, mc.d_feat);

    // shared: features -> hidden sequence, plus the masked-prediction heads
    // used only during pretraining (one per signal frame within a feature
    // frame).
    plan_linear(&mut p, "shared/in", mc.d_feat, h);
    for i in 0..mc.shared_layers {
        plan_block(&mut p, &format!("shared/b{i}"), h);
    }
    plan_linear(&mut p, "shared/bestrq_even", h, mc.bestrq_codes);
    plan_linear(&mut p, "shared/bestrq_odd", h, mc.bestrq_codes);

    // rnnt: prediction network over byte prefixes plus the joint.
    plan_param(&mut p, "rnnt/emb".into(), vec![257, h], Init::Normal(0.3));
    plan_param(&mut p, "rnnt/rec_wx".into(), vec![h, h], Init::Normal(1.0 / (h as f64).sqrt()));
    plan_param(&mut p, "rnnt/rec_wh".into(), vec![h, h], Init::Normal(1.0 / (h as f64).sqrt()));
    plan_param(&mut p, "rnnt/rec_b".into(), vec![h], Init::Zeros);
    plan_linear(&mut p, "rnnt/enc", h, h);
    plan_linear(&mut p, "rnnt/pred", h, h);
    plan_linear(&mut p, "rnnt/joint", h, 257);

    // text: byte embedding sized so that concatenating language and speaker
    // embeddings lands exactly on hidden_dim.
    plan_param(
        &mut p,
        "text/emb".into(),
        vec![257, h - 2 * COND_DIM],
        Init::Normal(0.3),
    );
    plan_param(&mut p, "text/lang_emb".into(), vec![mc.n_langs, COND_DIM], Init::Normal(0.3));
    plan_param(&mut p, "text/spk_emb".into(), vec![mc.n_spks, COND_DIM], Init::Normal(0.3));
    for i in 0..mc.text_layers {
        plan_block(&mut p, &format!("text/b{i}"), h);
    }
    plan_linear(&mut p, "text/mlm", h, 257);

    // duration: two-layer head, exponentiated downstream.
    plan_linear(&mut p, "duration/l1", h, h);
    plan_linear(&mut p, "duration/l2", h, 1);

    // decoder: K refinement stacks; each consumes upsampled encodings with
    // their ramp column, the broadcast latent, and the previous refinement.
    let dec_in = h + 1 + mc.vae_dim + mc.d_feat;
    for k in 0..mc.refinements {
        plan_linear(&mut p, &format!("decoder/it{k}/in"), dec_in, h);
        for i in 0..mc.decoder_layers {
            plan_block(&mut p, &format!("decoder/it{k}/b{i}"), h);
        }
        plan_linear(&mut p, &format!("decoder/it{k}/out"), h, mc.d_feat);
    }

    // vae: global posterior over mean-pooled target features.
    plan_linear(&mut p, "vae/l1", mc.d_feat, h);
    plan_linear(&mut p, "vae/mu", h, mc.vae_dim);
    plan_linear(&mut p, "vae/lv", h, mc.vae_dim);

    // vocoder: affine feature -> two signal frames, filled in by the
    // least-squares fit, never by gradients.
    plan_param(
        &mut p,
        "vocoder/w".into(),
        vec![mc.d_feat + 1, 2 * mc.d_sig],
        Init::Zeros,
    );
    plan_param(&mut p, "vocoder/fitted".into(), vec![1], Init::Zeros);

    p
}

fn group_of(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

/// One parameter group: named tensors packed into a single flat buffer,
/// with Adam moments of the same length.
#[derive(Clone)]
pub struct ParamGroup {
    pub name: String,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    data: Vec<f64>,
    pub adam: AdamState,
}

impl ParamGroup {
    fn numel_of(shape: &[usize]) -> usize {
        shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shape_of(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    fn slice(&self, i: usize) -> &[f64] {
        let n = Self::numel_of(&self.shapes[i]);
        &self.data[self.offsets[i]..self.offsets[i] + n]
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        Tensor::new(self.shapes[i].clone(), self.slice(i).to_vec())
    }

    pub fn set_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if t.shape() != self.shapes[i].as_slice() {
            return Err(Error::Shape {
                op: "set_tensor",
                detail: format!("{name}: stored {:?}, provided {:?}", self.shapes[i], t.shape()),
            });
        }
        let n = t.numel();
        self.data[self.offsets[i]..self.offsets[i] + n].copy_from_slice(t.data());
        Ok(())
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// The whole model's parameters, keyed by group name.
#[derive(Clone)]
pub struct ParamStore {
    pub config: ModelConfig,
    groups: BTreeMap<String, ParamGroup>,
}

/// A store bound onto a graph: every parameter is a leaf variable, trainable
/// groups with gradient tracking enabled.
pub struct Bound {
    vars: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no bound parameter named {name}")))
    }

    pub fn trainable_groups(&self) -> &[String] {
        &self.trainable
    }
}

impl ParamStore {
    /// Initialize all groups deterministically from the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
        config.validate()?;
        let plan = param_plan(config);
        let mut groups: BTreeMap<String, ParamGroup> = BTreeMap::new();
        for gname in GROUPS {
            groups.insert(
                gname.to_string(),
                ParamGroup {
                    name: gname.to_string(),
                    names: Vec::new(),
                    shapes: Vec::new(),
                    offsets: Vec::new(),
                    data: Vec::new(),
                    adam: AdamState::new(0),
                },
            );
        }
        let mut rngs: BTreeMap<&str, _> = GROUPS
            .iter()
            .enumerate()
            .map(|(i, &g)| (g, rng::rng_for(seed, &[purpose::INIT, i as u64])))
            .collect();
        for p in plan {
            let gname = group_of(&p.name).to_string();
            let group = groups
                .get_mut(&gname)
                .ok_or_else(|| Error::Contract(format!("parameter {} has unknown group", p.name)))?;
            let rng = rngs.get_mut(gname.as_str()).unwrap();
            let numel = ParamGroup::numel_of(&p.shape);
            let values: Vec<f64> = match p.init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Normal(std) => {
                    use rand::Rng;
                    use rand_distr::StandardNormal;
                    (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
                }
            };
            group.offsets.push(group.data.len());
            group.names.push(p.name);
            group.shapes.push(p.shape);
            group.data.extend(values);
        }
        for g in groups.values_mut() {
            g.adam = AdamState::new(g.data.len());
        }
        Ok(ParamStore { config: config.clone(), groups })
    }

    /// Rebuild a store from checkpoint blocks. Group layout is re-derived
    /// from the config, so block lengths must match exactly.
    pub fn from_blocks(
        config: &ModelConfig,
        mut blocks: BTreeMap<String, (Vec<f64>, AdamState)>,
    ) -> Result<ParamStore> {
        let mut store = ParamStore::init(config, 0)?;
        for (name, group) in store.groups.iter_mut() {
            let (data, adam) = blocks.remove(name).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing parameter group {name}"))
            })?;
            if data.len() != group.data.len() || adam.m.len() != group.data.len() {
                return Err(Error::Format(format!(
                    "checkpoint group {name} has {} values, model expects {}",
                    data.len(),
                    group.data.len()
                )));
            }
            group.data = data;
            group.adam = adam;
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(Error::Format(format!("checkpoint has unknown group {extra}")));
        }
        Ok(store)
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter group named {name}")))
    }

    pub fn group_mut(&mut self, name: &str) -> Result<&mut ParamGroup> {
        self.groups
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter group named {name}")))
    }

    pub fn checksum(&self, group: &str) -> Result<String> {
        Ok(self.group(group)?.checksum())
    }

    /// Bind every parameter as a graph leaf. Groups listed in `trainable`
    /// track gradients; all others are frozen for this graph.
    pub fn bind(&self, g: &mut Graph, trainable: &[&str]) -> Result<Bound> {
        for t in trainable {
            if !self.groups.contains_key(*t) {
                return Err(Error::Contract(format!("unknown trainable group {t}")));
            }
        }
        let mut vars = BTreeMap::new();
        for (gname, group) in &self.groups {
            let requires = trainable.contains(&gname.as_str());
            for i in 0..group.names.len() {
                let t = Tensor::new(group.shapes[i].clone(), group.slice(i).to_vec())?;
                vars.insert(group.names[i].clone(), g.leaf(t, requires));
            }
        }
        Ok(Bound { vars, trainable: trainable.iter().map(|s| s.to_string()).collect() })
    }

    /// Pull gradients for the bound trainable groups out of a finished
    /// graph, clip them jointly to `max_norm`, and apply one Adam step per
    /// group. Frozen groups are not touched at all — their parameters and
    /// moments stay bit-identical. Returns the pre-clip global norm.
    pub fn apply_gradients(
        &mut self,
        g: &Graph,
        bound: &Bound,
        hyper: &AdamHyper,
        max_norm: f64,
    ) -> Result<f64> {
        let mut flats: Vec<(String, Vec<f64>)> = Vec::new();
        for gname in &bound.trainable {
            let group = self.group(gname)?;
            let mut flat = vec![0.0; group.data.len()];
            for i in 0..group.names.len() {
                let var = bound.var(&group.names[i])?;
                if let Some(grad) = g.grad(var) {
                    let n = grad.len();
                    flat[group.offsets[i]..group.offsets[i] + n].copy_from_slice(grad);
                }
            }
            flats.push((gname.clone(), flat));
        }
        let norm = {
            let mut slices: Vec<&mut [f64]> =
                flats.iter_mut().map(|(_, f)| f.as_mut_slice()).collect();
            clip_global_norm(&mut slices, max_norm)?
        };
        for (gname, flat) in &flats {
            let group = self.groups.get_mut(gname).unwrap();
            adam_step(gname, &mut group.data, flat, &mut group.adam, hyper)?;
        }
        Ok(norm)
    }
}
