//! The dual-branch architecture: a gradient-trained query side (encoder,
//! projector, predictor, classifier) mirrored by a momentum key side (encoder,
//! projector) that only changes through EMA updates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tape::{BnMode, BnStats, Tape, Var};
use crate::tensor::{r, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of the three conv blocks; the last is the feature
    /// dimension d_f.
    pub widths: [usize; 3],
    /// Projection/prediction dimension d_p.
    pub embed_dim: usize,
    pub num_classes: usize,
    pub use_predictor: bool,
    pub use_projector: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            widths: [32, 64, 64],
            embed_dim: 64,
            num_classes: 4,
            use_predictor: true,
            use_projector: true,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Clone, Debug)]
pub struct BnLayer<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BnStats<T>,
}

impl<T: Real> BnLayer<T> {
    fn new(channels: usize) -> Self {
        BnLayer {
            gamma: Tensor::new(vec![channels], vec![T::one(); channels]).unwrap(),
            beta: Tensor::zeros(vec![channels]),
            stats: BnStats::new(channels),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub w: Tensor<T>,
    pub bn: BnLayer<T>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct LinearLayer<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

/// Two-layer MLP head (linear, batchnorm, relu, linear); used for both the
/// projector and the predictor. The final layer is affine so head outputs
/// span all signs — an l2-normalized embedding must never collapse to a zero
/// row, which a trailing relu could produce.
#[derive(Clone, Debug)]
pub struct ProjHead<T> {
    pub lin1: LinearLayer<T>,
    pub bn: BnLayer<T>,
    pub lin2: LinearLayer<T>,
}

#[derive(Clone, Debug)]
pub struct DualModel<T> {
    pub cfg: ModelConfig,
    pub q_enc: Encoder<T>,
    pub q_proj: ProjHead<T>,
    pub q_pred: ProjHead<T>,
    pub classifier: LinearLayer<T>,
    pub k_enc: Encoder<T>,
    pub k_proj: ProjHead<T>,
}

/// Linear momentum ramp from 0.99 at step 0 to 1.0 at the final step.
pub fn momentum_at(step: usize, total_steps: usize) -> f64 {
    debug_assert!(total_steps >= 1 && step <= total_steps);
    0.99 + 0.01 * (step as f64 / total_steps as f64)
}

fn kaiming_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| r::<T>(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn new_encoder<T: Real>(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Encoder<T> {
    let [w1, w2, w3] = cfg.widths;
    let dims = [(cfg.in_channels, w1, 1), (w1, w2, 2), (w2, w3, 1)];
    let blocks = dims
        .iter()
        .map(|&(cin, cout, stride)| ConvBlock {
            w: kaiming_uniform(rng, vec![cout, cin, 3, 3], cin * 9),
            bn: BnLayer::new(cout),
            stride,
        })
        .collect();
    Encoder { blocks }
}

fn new_head<T: Real>(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> ProjHead<T> {
    let hidden = dout;
    ProjHead {
        lin1: LinearLayer {
            w: kaiming_uniform(rng, vec![din, hidden], din),
            b: Tensor::zeros(vec![hidden]),
        },
        bn: BnLayer::new(hidden),
        lin2: LinearLayer {
            w: kaiming_uniform(rng, vec![hidden, dout], hidden),
            b: Tensor::zeros(vec![dout]),
        },
    }
}

/// One recorded forward pass of a query-side component: the output variable
/// plus (parameter slot, leaf) bindings for gradient harvesting.
pub struct Recorded {
    pub var: Var,
    pub binds: Vec<(usize, Var)>,
}

// Canonical query-parameter slot layout:
//   0..9   encoder blocks (w, gamma, beta) x 3
//   9..15  projector (w1, b1, gamma, beta, w2, b2)
//   15..21 predictor (w1, b1, gamma, beta, w2, b2)
//   21..23 classifier (w, b)
pub const SLOT_PROJ: usize = 9;
pub const SLOT_PRED: usize = 15;
pub const SLOT_CLS: usize = 21;
pub const NUM_QUERY_SLOTS: usize = 23;

impl<T: Real> DualModel<T> {
    /// Fresh model; the key side starts as an exact copy of the query side.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q_enc = new_encoder::<T>(&mut rng, &cfg);
        let d_f = cfg.feature_dim();
        let q_proj = new_head(&mut rng, d_f, cfg.embed_dim);
        let q_pred = new_head(&mut rng, cfg.embed_dim, cfg.embed_dim);
        let classifier = LinearLayer {
            w: kaiming_uniform(&mut rng, vec![d_f, cfg.num_classes], d_f),
            b: Tensor::zeros(vec![cfg.num_classes]),
        };
        let k_enc = q_enc.clone();
        let k_proj = q_proj.clone();
        DualModel {
            cfg,
            q_enc,
            q_proj,
            q_pred,
            classifier,
            k_enc,
            k_proj,
        }
    }

    /// Trainable query-side parameters in canonical slot order.
    pub fn query_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = Vec::with_capacity(NUM_QUERY_SLOTS);
        for b in &mut self.q_enc.blocks {
            v.push(&mut b.w);
            v.push(&mut b.bn.gamma);
            v.push(&mut b.bn.beta);
        }
        for head in [&mut self.q_proj, &mut self.q_pred] {
            v.push(&mut head.lin1.w);
            v.push(&mut head.lin1.b);
            v.push(&mut head.bn.gamma);
            v.push(&mut head.bn.beta);
            v.push(&mut head.lin2.w);
            v.push(&mut head.lin2.b);
        }
        v.push(&mut self.classifier.w);
        v.push(&mut self.classifier.b);
        v
    }

    pub fn query_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..3 {
            for p in ["w", "bn_gamma", "bn_beta"] {
                names.push(format!("q.enc.{i}.{p}"));
            }
        }
        for head in ["q.proj", "q.pred"] {
            for p in ["w1", "b1", "bn_gamma", "bn_beta", "w2", "b2"] {
                names.push(format!("{head}.{p}"));
            }
        }
        names.push("classifier.w".into());
        names.push("classifier.b".into());
        names
    }

    fn encoder_pass(
        tape: &mut Tape<T>,
        enc: &mut Encoder<T>,
        x: Var,
        mode: BnMode,
        record: bool,
        binds: &mut Vec<(usize, Var)>,
        slot_base: usize,
    ) -> Result<Var> {
        let mut h = x;
        let mut slot = slot_base;
        for block in enc.blocks.iter_mut() {
            let w = tape.leaf(&block.w, record);
            let g = tape.leaf(&block.bn.gamma, record);
            let b = tape.leaf(&block.bn.beta, record);
            if record {
                binds.extend([(slot, w), (slot + 1, g), (slot + 2, b)]);
            }
            slot += 3;
            h = tape.conv2d(h, w, block.stride)?;
            h = tape.batchnorm(h, g, b, &mut block.bn.stats, mode)?;
            h = tape.relu(h);
        }
        tape.global_avg_pool(h)
    }

    fn head_pass(
        tape: &mut Tape<T>,
        head: &mut ProjHead<T>,
        x: Var,
        mode: BnMode,
        record: bool,
        binds: &mut Vec<(usize, Var)>,
        slot_base: usize,
    ) -> Result<Var> {
        let w1 = tape.leaf(&head.lin1.w, record);
        let b1 = tape.leaf(&head.lin1.b, record);
        let g = tape.leaf(&head.bn.gamma, record);
        let bt = tape.leaf(&head.bn.beta, record);
        let w2 = tape.leaf(&head.lin2.w, record);
        let b2 = tape.leaf(&head.lin2.b, record);
        if record {
            binds.extend([
                (slot_base, w1),
                (slot_base + 1, b1),
                (slot_base + 2, g),
                (slot_base + 3, bt),
                (slot_base + 4, w2),
                (slot_base + 5, b2),
            ]);
        }
        // relu before batchnorm: the head output stays an affine map of the
        // normalized activations, so a sample's embedding row can only be
        // exactly zero in degenerate all-identical batches (a hard error at
        // the normalization step, by design).
        let h = tape.linear(x, w1, b1)?;
        let h = tape.relu(h);
        let h = tape.batchnorm(h, g, bt, &mut head.bn.stats, mode)?;
        tape.linear(h, w2, b2)
    }

    /// Query-encoder features f_q(x), gradient-recording when `record`.
    pub fn forward_features(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        record: bool,
    ) -> Result<Recorded> {
        if x.shape().len() != 4 || x.shape()[1] != self.cfg.in_channels {
            return Err(CoreError::DimensionMismatch(format!(
                "expected NCHW batch with {} channels, got {:?}",
                self.cfg.in_channels,
                x.shape()
            )));
        }
        let vx = tape.leaf(x, false);
        let mut binds = Vec::new();
        let var = Self::encoder_pass(tape, &mut self.q_enc, vx, mode, record, &mut binds, 0)?;
        Ok(Recorded { var, binds })
    }

    /// q = g_q(f'_q(features)), l2-normalized. Ablation toggles degrade the
    /// skipped blocks to identity (or to a plain affine resize when the
    /// feature and embedding dimensions differ).
    pub fn query_embedding_from_features(
        &mut self,
        tape: &mut Tape<T>,
        features: Var,
        mode: BnMode,
        record: bool,
        binds: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        let mut h = features;
        if self.cfg.use_projector {
            h = Self::head_pass(tape, &mut self.q_proj, h, mode, record, binds, SLOT_PROJ)?;
        } else if self.cfg.feature_dim() != self.cfg.embed_dim {
            let w = tape.leaf(&self.q_proj.lin1.w, record);
            let b = tape.leaf(&self.q_proj.lin1.b, record);
            if record {
                binds.extend([(SLOT_PROJ, w), (SLOT_PROJ + 1, b)]);
            }
            h = tape.linear(h, w, b)?;
        }
        if self.cfg.use_predictor {
            h = Self::head_pass(tape, &mut self.q_pred, h, mode, record, binds, SLOT_PRED)?;
        }
        tape.l2_normalize_rows(h)
    }

    /// Full query branch on a batch: (embedding, features, binds).
    pub fn forward_query_embedding(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        record: bool,
    ) -> Result<(Var, Var, Vec<(usize, Var)>)> {
        let mut rec = self.forward_features(tape, x, mode, record)?;
        let embed =
            self.query_embedding_from_features(tape, rec.var, mode, record, &mut rec.binds)?;
        Ok((embed, rec.var, rec.binds))
    }

    /// k = f'_k(f_k(x)), unit rows, no gradient recording. Key-side batchnorm
    /// uses batch statistics in `BnMode::TrainNoUpdate`; its running stats are
    /// driven solely by [`DualModel::ema_update`].
    pub fn forward_key_embedding(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let mode = if mode == BnMode::Train {
            BnMode::TrainNoUpdate
        } else {
            mode
        };
        let mut tape = Tape::new();
        let vx = tape.leaf(x, false);
        let mut binds = Vec::new();
        let mut h = Self::encoder_pass(&mut tape, &mut self.k_enc, vx, mode, false, &mut binds, 0)?;
        if self.cfg.use_projector {
            h = Self::head_pass(&mut tape, &mut self.k_proj, h, mode, false, &mut binds, 0)?;
        } else if self.cfg.feature_dim() != self.cfg.embed_dim {
            let w = tape.leaf(&self.k_proj.lin1.w, false);
            let b = tape.leaf(&self.k_proj.lin1.b, false);
            h = tape.linear(h, w, b)?;
        }
        let out = tape.l2_normalize_rows(h)?;
        Ok(tape.value_tensor(out))
    }

    /// Class logits from query features.
    pub fn classify(
        &mut self,
        tape: &mut Tape<T>,
        features: Var,
        record: bool,
        binds: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        let w = tape.leaf(&self.classifier.w, record);
        let b = tape.leaf(&self.classifier.b, record);
        if record {
            binds.extend([(SLOT_CLS, w), (SLOT_CLS + 1, b)]);
        }
        tape.linear(features, w, b)
    }

    /// theta_k <- m*theta_k + (1-m)*theta_q for every paired parameter and
    /// batchnorm running statistic. Query parameters are never touched.
    pub fn ema_update(&mut self, momentum: f64) {
        let m = r::<T>(momentum);
        let one_m = T::one() - m;
        let blend = |k: &mut [T], q: &[T]| {
            for (kv, &qv) in k.iter_mut().zip(q) {
                *kv = m * *kv + one_m * qv;
            }
        };
        for (kb, qb) in self.k_enc.blocks.iter_mut().zip(&self.q_enc.blocks) {
            blend(kb.w.data_mut(), qb.w.data());
            blend(kb.bn.gamma.data_mut(), qb.bn.gamma.data());
            blend(kb.bn.beta.data_mut(), qb.bn.beta.data());
            blend(&mut kb.bn.stats.mean, &qb.bn.stats.mean);
            blend(&mut kb.bn.stats.var, &qb.bn.stats.var);
        }
        let (kp, qp) = (&mut self.k_proj, &self.q_proj);
        blend(kp.lin1.w.data_mut(), qp.lin1.w.data());
        blend(kp.lin1.b.data_mut(), qp.lin1.b.data());
        blend(kp.bn.gamma.data_mut(), qp.bn.gamma.data());
        blend(kp.bn.beta.data_mut(), qp.bn.beta.data());
        blend(kp.lin2.w.data_mut(), qp.lin2.w.data());
        blend(kp.lin2.b.data_mut(), qp.lin2.b.data());
        blend(&mut kp.bn.stats.mean, &qp.bn.stats.mean);
        blend(&mut kp.bn.stats.var, &qp.bn.stats.var);
    }

    /// All parameters and running statistics as named tensors, in checkpoint
    /// order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: &[usize], data: &[T]| {
            out.push((name, shape.to_vec(), data.iter().map(|v| v.to_f64()).collect()));
        };
        let enc = |prefix: &str, e: &Encoder<T>, push: &mut dyn FnMut(String, &[usize], &[T])| {
            for (i, b) in e.blocks.iter().enumerate() {
                push(format!("{prefix}.{i}.w"), b.w.shape(), b.w.data());
                push(format!("{prefix}.{i}.bn_gamma"), b.bn.gamma.shape(), b.bn.gamma.data());
                push(format!("{prefix}.{i}.bn_beta"), b.bn.beta.shape(), b.bn.beta.data());
                push(format!("{prefix}.{i}.bn_mean"), &[b.bn.stats.mean.len()], &b.bn.stats.mean);
                push(format!("{prefix}.{i}.bn_var"), &[b.bn.stats.var.len()], &b.bn.stats.var);
            }
        };
        let head = |prefix: &str, h: &ProjHead<T>, push: &mut dyn FnMut(String, &[usize], &[T])| {
            push(format!("{prefix}.w1"), h.lin1.w.shape(), h.lin1.w.data());
            push(format!("{prefix}.b1"), h.lin1.b.shape(), h.lin1.b.data());
            push(format!("{prefix}.bn_gamma"), h.bn.gamma.shape(), h.bn.gamma.data());
            push(format!("{prefix}.bn_beta"), h.bn.beta.shape(), h.bn.beta.data());
            push(format!("{prefix}.w2"), h.lin2.w.shape(), h.lin2.w.data());
            push(format!("{prefix}.b2"), h.lin2.b.shape(), h.lin2.b.data());
            push(format!("{prefix}.bn_mean"), &[h.bn.stats.mean.len()], &h.bn.stats.mean);
            push(format!("{prefix}.bn_var"), &[h.bn.stats.var.len()], &h.bn.stats.var);
        };
        enc("q.enc", &self.q_enc, &mut push);
        head("q.proj", &self.q_proj, &mut push);
        head("q.pred", &self.q_pred, &mut push);
        push("classifier.w".into(), self.classifier.w.shape(), self.classifier.w.data());
        push("classifier.b".into(), self.classifier.b.shape(), self.classifier.b.data());
        enc("k.enc", &self.k_enc, &mut push);
        head("k.proj", &self.k_proj, &mut push);
        out
    }

}

// ---- checkpoint format -----------------------------------------------------
//
// Layout (all integers little-endian):
//   magic  b"MBAL"            4 bytes
//   version u32               currently 1
//   config: in_channels u32, widths [u32;3], embed_dim u32, num_classes u32,
//           use_predictor u8, use_projector u8
//   count u32
//   per entry: name_len u32, name bytes (utf-8), ndim u32, dims [u32],
//              values f32 little-endian
// Values are stored as 32-bit floats; an f64-mode model is truncated on save.

const CKPT_MAGIC: &[u8; 4] = b"MBAL";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Real>(model: &DualModel<T>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = &model.cfg;
    buf.extend_from_slice(&(cfg.in_channels as u32).to_le_bytes());
    for w in cfg.widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(cfg.embed_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.num_classes as u32).to_le_bytes());
    buf.push(cfg.use_predictor as u8);
    buf.push(cfg.use_projector as u8);
    let entries = model.named_tensors();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::CheckpointFormat("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<DualModel<T>> {
    let bytes = std::fs::read(path)?;
    let mut rd = Reader { buf: &bytes, pos: 0 };
    if rd.take(4)? != CKPT_MAGIC {
        return Err(CoreError::CheckpointFormat("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != CKPT_VERSION {
        return Err(CoreError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let cfg = ModelConfig {
        in_channels: rd.u32()? as usize,
        widths: [rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize],
        embed_dim: rd.u32()? as usize,
        num_classes: rd.u32()? as usize,
        use_predictor: rd.u8()? != 0,
        use_projector: rd.u8()? != 0,
    };
    let mut model = DualModel::<T>::new(cfg, 0);
    let count = rd.u32()? as usize;
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = rd.u32()? as usize;
        let name = String::from_utf8(rd.take(name_len)?.to_vec())
            .map_err(|_| CoreError::CheckpointFormat("non-utf8 name".into()))?;
        let ndim = rd.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = rd.take(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push((name, shape, data));
    }
    if rd.pos != bytes.len() {
        return Err(CoreError::CheckpointFormat("trailing bytes".into()));
    }
    model.apply_entries(&entries)?;
    Ok(model)
}

impl<T: Real> DualModel<T> {
    fn apply_entries(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let expected = self.named_tensors();
        if expected.len() != entries.len() {
            return Err(CoreError::CheckpointFormat(format!(
                "expected {} tensors, checkpoint has {}",
                expected.len(),
                entries.len()
            )));
        }
        for ((ename, eshape, _), (name, shape, data)) in expected.iter().zip(entries) {
            if ename != name || eshape != shape {
                return Err(CoreError::CheckpointFormat(format!(
                    "entry mismatch: expected {ename} {eshape:?}, got {name} {shape:?}"
                )));
            }
            self.set_named(name, data)?;
        }
        Ok(())
    }

    fn set_named(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let set_t = |t: &mut Tensor<T>, data: &[f64]| {
            for (dst, &src) in t.data_mut().iter_mut().zip(data) {
                *dst = T::from_f64(src);
            }
        };
        let set_v = |v: &mut Vec<T>, data: &[f64]| {
            for (dst, &src) in v.iter_mut().zip(data) {
                *dst = T::from_f64(src);
            }
        };
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["classifier", "w"] => set_t(&mut self.classifier.w, data),
            ["classifier", "b"] => set_t(&mut self.classifier.b, data),
            [side, "enc", idx, field] => {
                let enc = if *side == "q" { &mut self.q_enc } else { &mut self.k_enc };
                let i: usize = idx.parse().map_err(|_| {
                    CoreError::CheckpointFormat(format!("bad block index in {name}"))
                })?;
                let b = &mut enc.blocks[i];
                match *field {
                    "w" => set_t(&mut b.w, data),
                    "bn_gamma" => set_t(&mut b.bn.gamma, data),
                    "bn_beta" => set_t(&mut b.bn.beta, data),
                    "bn_mean" => set_v(&mut b.bn.stats.mean, data),
                    "bn_var" => set_v(&mut b.bn.stats.var, data),
                    _ => return Err(CoreError::CheckpointFormat(format!("unknown field {name}"))),
                }
            }
            [side, comp, field] => {
                let h = match (*side, *comp) {
                    ("q", "proj") => &mut self.q_proj,
                    ("q", "pred") => &mut self.q_pred,
                    ("k", "proj") => &mut self.k_proj,
                    _ => {
                        return Err(CoreError::CheckpointFormat(format!("unknown tensor {name}")))
                    }
                };
                match *field {
                    "w1" => set_t(&mut h.lin1.w, data),
                    "b1" => set_t(&mut h.lin1.b, data),
                    "bn_gamma" => set_t(&mut h.bn.gamma, data),
                    "bn_beta" => set_t(&mut h.bn.beta, data),
                    "w2" => set_t(&mut h.lin2.w, data),
                    "b2" => set_t(&mut h.lin2.b, data),
                    "bn_mean" => set_v(&mut h.bn.stats.mean, data),
                    "bn_var" => set_v(&mut h.bn.stats.var, data),
                    _ => return Err(CoreError::CheckpointFormat(format!("unknown field {name}"))),
                }
            }
            _ => return Err(CoreError::CheckpointFormat(format!("unknown tensor {name}"))),
        }
        Ok(())
    }
}
