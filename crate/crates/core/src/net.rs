//! The three sequential Q-heads.
//!
//! `pick` is a small U-Net producing the encoding `g(s)` and the pick map Q1.
//! `crop` encodes the pick-centred crop; the encoding is pasted into a canvas
//! aligned with `g(s)` at the pick location. `place` decodes `(g, canvas)` to
//! Q2 and `theta` maps `(g, canvas, pooled Q2)` to the K_θ values of Q3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    argmax_first, decode_params_into, encode_params, fd_rel_error, huber_loss, AdamState, Cache, Graph, GraphBuilder, NnError,
    NodeId, Real, Tensor,
};
use crate::perception::{cloth_mask, rotate_observation, snap_to_cloth, Mask, Observation, Pixel};

pub const ROTATION_STEP_DEG: f64 = 15.0;
pub const ROTATION_COUNT: usize = 13;

pub const NET_MAGIC: &[u8; 8] = b"QDPNET\0\x01";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("action out of bounds: {0}")]
    ActionOutOfBounds(String),
    #[error("observation has no cloth pixels")]
    EmptyMask,
    #[error("non-finite gradient in graph {graph}, tensor {tensor}; update rejected")]
    NonFiniteGradient { graph: usize, tensor: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// D, the observation side in pixels.
    pub image_size: usize,
    /// E, the pick-centred crop side in pixels.
    pub crop_size: usize,
    /// K_θ.
    pub theta_bins: usize,
    pub unet_channels: [usize; 3],
    pub crop_channels: [usize; 2],
    pub theta_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            crop_size: 32,
            theta_bins: 5,
            unet_channels: [8, 16, 32],
            crop_channels: [8, 16],
            theta_channels: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return bad(format!("image_size {} must be a multiple of 4 and >= 8", self.image_size));
        }
        if self.crop_size < 4 || self.crop_size % 4 != 0 || self.crop_size > self.image_size {
            return bad(format!(
                "crop_size {} must be a multiple of 4 and <= image_size",
                self.crop_size
            ));
        }
        if self.theta_bins == 0 {
            return bad("theta_bins must be >= 1".into());
        }
        if self.unet_channels.contains(&0) || self.crop_channels.contains(&0) || self.theta_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    fn coarse(&self) -> usize {
        self.image_size / 4
    }
}

/// One composed action. Pixels are in the frame rotated by `angle` degrees
/// relative to the observation it was chosen from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposedAction {
    pub pick: Pixel,
    pub place: Pixel,
    pub theta: usize,
    pub angle: f64,
    /// False for the no-op emitted when the observation shows no cloth.
    pub valid: bool,
}

impl ComposedAction {
    pub fn noop() -> Self {
        Self {
            pick: Pixel::new(0, 0),
            place: Pixel::new(0, 0),
            theta: 0,
            angle: 0.0,
            valid: false,
        }
    }
}

/// Minibatch of stored transitions for the training pass.
#[derive(Clone, Debug)]
pub struct TrainBatch<T> {
    /// `[B, 1, D, D]`.
    pub obs: Tensor<T>,
    pub picks: Vec<Pixel>,
    pub places: Vec<Pixel>,
    pub thetas: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadLosses {
    pub total: f64,
    pub pick: f64,
    pub place: f64,
    pub theta: f64,
}

/// Parameter gradients for the four graphs (pick, crop, place, theta).
#[derive(Clone, Debug)]
pub struct NetGrads<T> {
    pub graphs: [Vec<Tensor<T>>; 4],
}

impl<T: Real> NetGrads<T> {
    pub fn norm(&self) -> f64 {
        self.graphs
            .iter()
            .flat_map(|g| g.iter())
            .map(|t| t.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::from_f64(s);
        self.graphs.iter_mut().flatten().for_each(|t| t.scale(s));
    }
}

/// Greedy sequential choice for one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreedyChoice {
    pub pick: Pixel,
    pub place: Pixel,
    pub theta: usize,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

#[derive(Clone, Debug)]
pub struct RotationSearch {
    pub action: ComposedAction,
    /// Masked max of Q1 at the chosen angle.
    pub pick_q: f64,
    /// `(angle, masked max Q1)` for every angle tried; `None` if the rotated view had no cloth.
    pub scores: Vec<(f64, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: NetConfig,
    param_counts: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct QdpNetwork<T> {
    pub config: NetConfig,
    pub pick: Graph<T>,
    pub crop: Graph<T>,
    pub place: Graph<T>,
    pub theta: Graph<T>,
}

struct Forward<T> {
    g: Tensor<T>,
    q1: Tensor<T>,
    w: Tensor<T>,
    canvas: Tensor<T>,
    q2: Tensor<T>,
    q3: Tensor<T>,
    caches: [Cache<T>; 4],
}

fn conv_relu(b: &mut GraphBuilder, name: &str, x: NodeId, out: usize, stride: usize) -> Result<NodeId, NnError> {
    let c = b.conv(name, x, out, 3, stride, 1)?;
    b.relu(&format!("{name}_relu"), c)
}

fn check_pixel(p: Pixel, d: usize, what: &str) -> Result<(), NetError> {
    if p.row >= d || p.col >= d {
        return Err(NetError::ActionOutOfBounds(format!(
            "{what} ({}, {}) outside {d}x{d}",
            p.row, p.col
        )));
    }
    Ok(())
}

/// Row-major first maximum over the entries where `allowed` holds.
fn masked_argmax<T: Real>(values: &[T], allowed: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, (&v, &ok)) in values.iter().zip(allowed).enumerate() {
        if ok && best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Stacks observations into a `[B, 1, D, D]` tensor.
pub fn observation_batch<T: Real>(obs: &[&Observation]) -> Tensor<T> {
    let d = obs.first().map(|o| o.size).unwrap_or(0);
    let mut data = Vec::with_capacity(obs.len() * d * d);
    for o in obs {
        data.extend(o.image.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor {
        shape: vec![obs.len(), 1, d, d],
        data,
    }
}

impl<T: Real> QdpNetwork<T> {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self, NetError> {
        config.validate()?;
        let d = config.image_size;
        let e = config.crop_size;
        let q = config.coarse();
        let [c0, c1, c2] = config.unet_channels;
        let [k0, k1] = config.crop_channels;

        let mut b = GraphBuilder::new();
        let x = b.input("obs", &[1, d, d]);
        let e1 = conv_relu(&mut b, "enc1", x, c0, 1)?;
        let p1 = b.maxpool("pool1", e1)?;
        let e2 = conv_relu(&mut b, "enc2", p1, c1, 1)?;
        let p2 = b.maxpool("pool2", e2)?;
        let m1 = conv_relu(&mut b, "mid1", p2, c2, 1)?;
        let g = conv_relu(&mut b, "mid2", m1, c2, 1)?;
        let u2 = b.upsample("up2", g)?;
        let s2 = b.concat("skip2", &[u2, e2])?;
        let d2 = conv_relu(&mut b, "dec2", s2, c1, 1)?;
        let u1 = b.upsample("up1", d2)?;
        let s1 = b.concat("skip1", &[u1, e1])?;
        let d1 = conv_relu(&mut b, "dec1", s1, c0, 1)?;
        let q1 = b.conv("q1", d1, 1, 1, 1, 0)?;
        b.output(g);
        b.output(q1);
        let pick = b.build(rng)?;

        let mut b = GraphBuilder::new();
        let x = b.input("crop", &[1, e, e]);
        let c = conv_relu(&mut b, "crop1", x, k0, 1)?;
        let c = b.maxpool("crop_pool1", c)?;
        let c = conv_relu(&mut b, "crop2", c, k1, 1)?;
        let w = b.maxpool("crop_pool2", c)?;
        b.output(w);
        let crop = b.build(rng)?;

        let mut b = GraphBuilder::new();
        let gi = b.input("g", &[c2, q, q]);
        let ci = b.input("canvas", &[k1, q, q]);
        let f = b.concat("fuse", &[gi, ci])?;
        let f = conv_relu(&mut b, "place1", f, c1, 1)?;
        let f = b.upsample("place_up1", f)?;
        let f = conv_relu(&mut b, "place2", f, c0, 1)?;
        let f = b.upsample("place_up2", f)?;
        let f = conv_relu(&mut b, "place3", f, c0, 1)?;
        let q2 = b.conv("q2", f, 1, 1, 1, 0)?;
        b.output(q2);
        let place = b.build(rng)?;

        let tc = config.theta_channels;
        let mut b = GraphBuilder::new();
        let gi = b.input("g", &[c2, q, q]);
        let ci = b.input("canvas", &[k1, q, q]);
        let qi = b.input("q2_pooled", &[1, q, q]);
        let f = b.concat("theta_fuse", &[gi, ci, qi])?;
        let f = conv_relu(&mut b, "theta1", f, tc, 2)?;
        let f = conv_relu(&mut b, "theta2", f, tc, 2)?;
        let f = conv_relu(&mut b, "theta3", f, tc, 2)?;
        let q3 = b.dense("q3", f, config.theta_bins)?;
        b.output(q3);
        let theta = b.build(rng)?;

        Ok(Self {
            config,
            pick,
            crop,
            place,
            theta,
        })
    }

    pub fn graphs(&self) -> [&Graph<T>; 4] {
        [&self.pick, &self.crop, &self.place, &self.theta]
    }

    pub fn graphs_mut(&mut self) -> [&mut Graph<T>; 4] {
        [&mut self.pick, &mut self.crop, &mut self.place, &mut self.theta]
    }

    pub fn param_count(&self) -> usize {
        self.graphs().iter().map(|g| g.param_count()).sum()
    }

    pub fn cast<U: Real>(&self) -> QdpNetwork<U> {
        QdpNetwork {
            config: self.config.clone(),
            pick: self.pick.cast(),
            crop: self.crop.cast(),
            place: self.place.cast(),
            theta: self.theta.cast(),
        }
    }

    /// Hard copy of all parameters from `other`.
    pub fn copy_params_from(&mut self, other: &QdpNetwork<T>) {
        for (dst, src) in self.graphs_mut().into_iter().zip(other.graphs()) {
            dst.params.clone_from(&src.params);
        }
    }

    /// CRC32 over the serialized parameters; equal networks give equal checksums.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for g in self.graphs() {
            h.update(&encode_params(g));
        }
        h.finalize()
    }

    fn check_obs(&self, obs: &Tensor<T>) -> Result<(), NetError> {
        let d = self.config.image_size;
        let expected = vec![obs.batch(), 1, d, d];
        if obs.shape != expected {
            return Err(NetError::ShapeMismatch {
                what: "observation batch".into(),
                expected,
                found: obs.shape.clone(),
            });
        }
        Ok(())
    }

    /// `(g, Q1)` for a `[B, 1, D, D]` batch.
    pub fn pick_forward(&self, obs: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), NetError> {
        self.check_obs(obs)?;
        let mut out = self.pick.infer(&[obs])?;
        let q1 = out.pop().unwrap();
        let g = out.pop().unwrap();
        Ok((g, q1))
    }

    /// Pick-centred crops `[B, 1, E, E]`.
    pub fn crops(&self, obs: &Tensor<T>, picks: &[Pixel]) -> Result<Tensor<T>, NetError> {
        self.check_obs(obs)?;
        let d = self.config.image_size;
        let e = self.config.crop_size as isize;
        let half = e / 2;
        let mut out = Tensor::zeros(&[picks.len(), 1, e as usize, e as usize]);
        for (n, p) in picks.iter().enumerate() {
            check_pixel(*p, d, "pick")?;
            let src = obs.sample(n);
            let dst = out.sample_mut(n);
            for i in 0..e {
                let r = p.row as isize - half + i;
                if r < 0 || r >= d as isize {
                    continue;
                }
                for j in 0..e {
                    let c = p.col as isize - half + j;
                    if c >= 0 && c < d as isize {
                        dst[(i * e + j) as usize] = src[r as usize * d + c as usize];
                    }
                }
            }
        }
        Ok(out)
    }

    fn paste_offset(&self, p: Pixel) -> (isize, isize) {
        let half = (self.config.crop_size / 2) as isize;
        (
            (p.row as isize - half).div_euclid(4),
            (p.col as isize - half).div_euclid(4),
        )
    }

    /// Places the crop encoding `w` into a zero canvas aligned with `g(s)`.
    pub fn paste(&self, w: &Tensor<T>, picks: &[Pixel]) -> Tensor<T> {
        let q = self.config.coarse() as isize;
        let (ch, ws) = (w.shape[1], w.shape[2] as isize);
        let mut canvas = Tensor::zeros(&[picks.len(), ch, q as usize, q as usize]);
        for (n, p) in picks.iter().enumerate() {
            let (oi, oj) = self.paste_offset(*p);
            let src = w.sample(n);
            let dst = canvas.sample_mut(n);
            for c in 0..ch as isize {
                for i in 0..ws {
                    let r = oi + i;
                    if r < 0 || r >= q {
                        continue;
                    }
                    for j in 0..ws {
                        let col = oj + j;
                        if col >= 0 && col < q {
                            dst[((c * q + r) * q + col) as usize] = src[((c * ws + i) * ws + j) as usize];
                        }
                    }
                }
            }
        }
        canvas
    }

    /// Adjoint of [`paste`](Self::paste).
    fn unpaste(&self, dcanvas: &Tensor<T>, picks: &[Pixel], w_shape: &[usize]) -> Tensor<T> {
        let q = self.config.coarse() as isize;
        let (ch, ws) = (w_shape[1], w_shape[2] as isize);
        let mut dw = Tensor::zeros(w_shape);
        for (n, p) in picks.iter().enumerate() {
            let (oi, oj) = self.paste_offset(*p);
            let src = dcanvas.sample(n);
            let dst = dw.sample_mut(n);
            for c in 0..ch as isize {
                for i in 0..ws {
                    let r = oi + i;
                    if r < 0 || r >= q {
                        continue;
                    }
                    for j in 0..ws {
                        let col = oj + j;
                        if col >= 0 && col < q {
                            dst[((c * ws + i) * ws + j) as usize] = src[((c * q + r) * q + col) as usize];
                        }
                    }
                }
            }
        }
        dw
    }

    /// `(w, canvas, Q2)` given `g`, the crops and the pick pixels they came from.
    pub fn place_forward(
        &self,
        g: &Tensor<T>,
        crops: &Tensor<T>,
        picks: &[Pixel],
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NetError> {
        let w = self.crop.infer(&[crops])?.pop().unwrap();
        let canvas = self.paste(&w, picks);
        let q2 = self.place.infer(&[g, &canvas])?.pop().unwrap();
        Ok((w, canvas, q2))
    }

    /// 4x average pooling of Q2, fed to the θ head as a constant input.
    pub fn pool_q2(&self, q2: &Tensor<T>) -> Tensor<T> {
        let d = self.config.image_size;
        let q = self.config.coarse();
        let b = q2.batch();
        let mut out = Tensor::zeros(&[b, 1, q, q]);
        let norm = T::from_f64(1.0 / 16.0);
        for n in 0..b {
            let src = q2.sample(n);
            let dst = out.sample_mut(n);
            for r in 0..d {
                for c in 0..d {
                    dst[(r / 4) * q + c / 4] += src[r * d + c] * norm;
                }
            }
        }
        out
    }

    pub fn theta_forward(&self, g: &Tensor<T>, canvas: &Tensor<T>, q2: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let pooled = self.pool_q2(q2);
        Ok(self.theta.infer(&[g, canvas, &pooled])?.pop().unwrap())
    }

    fn forward_train(&self, batch: &TrainBatch<T>, frozen_q2: Option<&Tensor<T>>) -> Result<Forward<T>, NetError> {
        let n = batch.obs.batch();
        let d = self.config.image_size;
        if batch.picks.len() != n || batch.places.len() != n || batch.thetas.len() != n {
            return Err(NetError::ShapeMismatch {
                what: "train batch actions".into(),
                expected: vec![n; 3],
                found: vec![batch.picks.len(), batch.places.len(), batch.thetas.len()],
            });
        }
        for i in 0..n {
            check_pixel(batch.picks[i], d, "pick")?;
            check_pixel(batch.places[i], d, "place")?;
            if batch.thetas[i] >= self.config.theta_bins {
                return Err(NetError::ActionOutOfBounds(format!(
                    "theta bin {} >= {}",
                    batch.thetas[i], self.config.theta_bins
                )));
            }
        }
        let (mut out_p, cache_p) = self.pick.forward(&[&batch.obs])?;
        let q1 = out_p.pop().unwrap();
        let g = out_p.pop().unwrap();
        let crops = self.crops(&batch.obs, &batch.picks)?;
        let (mut out_c, cache_c) = self.crop.forward(&[&crops])?;
        let w = out_c.pop().unwrap();
        let canvas = self.paste(&w, &batch.picks);
        let (mut out_pl, cache_pl) = self.place.forward(&[&g, &canvas])?;
        let q2 = out_pl.pop().unwrap();
        let pooled = match frozen_q2 {
            Some(p) => p.clone(),
            None => self.pool_q2(&q2),
        };
        let (mut out_t, cache_t) = self.theta.forward(&[&g, &canvas, &pooled])?;
        let q3 = out_t.pop().unwrap();
        Ok(Forward {
            g,
            q1,
            w,
            canvas,
            q2,
            q3,
            caches: [cache_p, cache_c, cache_pl, cache_t],
        })
    }

    fn selected(&self, f: &Forward<T>, batch: &TrainBatch<T>) -> [Tensor<T>; 3] {
        let d = self.config.image_size;
        let k = self.config.theta_bins;
        let n = batch.obs.batch();
        let pick = (0..n).map(|i| f.q1.data[i * d * d + batch.picks[i].index(d)]).collect();
        let place = (0..n).map(|i| f.q2.data[i * d * d + batch.places[i].index(d)]).collect();
        let theta = (0..n).map(|i| f.q3.data[i * k + batch.thetas[i]]).collect();
        [pick, place, theta].map(|data| Tensor { shape: vec![n], data })
    }

    /// Shared-target loss: the sum over heads of the batch-mean Huber loss
    /// between each head's value at the stored sub-action and `y`.
    pub fn head_losses(&self, batch: &TrainBatch<T>, y: &[f64], delta: f64) -> Result<HeadLosses, NetError> {
        self.head_losses_with(batch, y, delta, None)
    }

    /// As [`head_losses`](Self::head_losses), optionally feeding the θ head a fixed pooled Q2.
    pub fn head_losses_with(
        &self,
        batch: &TrainBatch<T>,
        y: &[f64],
        delta: f64,
        frozen_q2: Option<&Tensor<T>>,
    ) -> Result<HeadLosses, NetError> {
        let f = self.forward_train(batch, frozen_q2)?;
        let target = self.target_tensor(y, batch.obs.batch())?;
        let sel = self.selected(&f, batch);
        let mut l = [0.0; 3];
        for (h, s) in sel.iter().enumerate() {
            l[h] = huber_loss(s, &target, delta)?.0;
        }
        Ok(HeadLosses {
            total: l.iter().sum(),
            pick: l[0],
            place: l[1],
            theta: l[2],
        })
    }

    fn target_tensor(&self, y: &[f64], n: usize) -> Result<Tensor<T>, NetError> {
        if y.len() != n {
            return Err(NetError::ShapeMismatch {
                what: "targets".into(),
                expected: vec![n],
                found: vec![y.len()],
            });
        }
        Ok(Tensor {
            shape: vec![n],
            data: y.iter().map(|&v| T::from_f64(v)).collect(),
        })
    }

    /// Loss and gradients of [`head_losses`](Self::head_losses). Targets are constants;
    /// the pooled Q2 fed to the θ head is treated as a constant input.
    pub fn loss_and_grads(
        &self,
        batch: &TrainBatch<T>,
        y: &[f64],
        delta: f64,
    ) -> Result<(HeadLosses, NetGrads<T>), NetError> {
        let n = batch.obs.batch();
        let d = self.config.image_size;
        let k = self.config.theta_bins;
        let f = self.forward_train(batch, None)?;
        let target = self.target_tensor(y, n)?;
        let sel = self.selected(&f, batch);
        let mut losses = [0.0; 3];
        let mut dsel = Vec::with_capacity(3);
        for (h, s) in sel.iter().enumerate() {
            let (l, g) = huber_loss(s, &target, delta)?;
            losses[h] = l;
            dsel.push(g);
        }

        let mut dq1 = Tensor::zeros(&f.q1.shape);
        let mut dq2 = Tensor::zeros(&f.q2.shape);
        let mut dq3 = Tensor::zeros(&f.q3.shape);
        for i in 0..n {
            dq1.data[i * d * d + batch.picks[i].index(d)] = dsel[0].data[i];
            dq2.data[i * d * d + batch.places[i].index(d)] = dsel[1].data[i];
            dq3.data[i * k + batch.thetas[i]] = dsel[2].data[i];
        }
        let [cache_p, cache_c, cache_pl, cache_t] = &f.caches;
        let gt = self.theta.backward(cache_t, &[Some(&dq3)])?;
        let gpl = self.place.backward(cache_pl, &[Some(&dq2)])?;
        let mut dg = gpl.inputs[0].clone();
        dg.add_assign(&gt.inputs[0]);
        let mut dcanvas = gpl.inputs[1].clone();
        dcanvas.add_assign(&gt.inputs[1]);
        debug_assert_eq!(dcanvas.shape, f.canvas.shape);
        debug_assert_eq!(dg.shape, f.g.shape);
        let dw = self.unpaste(&dcanvas, &batch.picks, &f.w.shape);
        let gc = self.crop.backward(cache_c, &[Some(&dw)])?;
        let gp = self.pick.backward(cache_p, &[Some(&dg), Some(&dq1)])?;
        Ok((
            HeadLosses {
                total: losses.iter().sum(),
                pick: losses[0],
                place: losses[1],
                theta: losses[2],
            },
            NetGrads {
                graphs: [gp.params, gc.params, gpl.params, gt.params],
            },
        ))
    }

    /// Greedy pick → place → θ for every state in the batch. Picks are restricted
    /// to `masks[i]` unless that mask is empty.
    pub fn greedy(&self, obs: &Tensor<T>, masks: &[Mask]) -> Result<Vec<GreedyChoice>, NetError> {
        let n = obs.batch();
        let d = self.config.image_size;
        let k = self.config.theta_bins;
        let (g, q1) = self.pick_forward(obs)?;
        let mut picks = Vec::with_capacity(n);
        let mut q1v = Vec::with_capacity(n);
        for i in 0..n {
            let vals = q1.sample(i);
            let idx = match masks.get(i) {
                Some(m) if !m.is_empty() => masked_argmax(vals, &m.data),
                _ => argmax_first(vals),
            }
            .unwrap_or(0);
            picks.push(Pixel::new(idx / d, idx % d));
            q1v.push(vals[idx].to_f64());
        }
        let crops = self.crops(obs, &picks)?;
        let (_, canvas, q2) = self.place_forward(&g, &crops, &picks)?;
        let q3 = self.theta_forward(&g, &canvas, &q2)?;
        Ok((0..n)
            .map(|i| {
                let p2 = q2.sample(i);
                let pl = argmax_first(p2).unwrap_or(0);
                let p3 = &q3.data[i * k..(i + 1) * k];
                let th = argmax_first(p3).unwrap_or(0);
                GreedyChoice {
                    pick: picks[i],
                    place: Pixel::new(pl / d, pl % d),
                    theta: th,
                    q1: q1v[i],
                    q2: p2[pl].to_f64(),
                    q3: p3[th].to_f64(),
                }
            })
            .collect())
    }

    /// ε-greedy composed action. Each sub-action is independently random with
    /// probability `eps`; otherwise it is the greedy choice given the earlier ones.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        mask: &Mask,
        eps: f64,
        snap_radius: usize,
        rng: &mut R,
    ) -> Result<ComposedAction, NetError> {
        if mask.is_empty() {
            return Ok(ComposedAction::noop());
        }
        let d = self.config.image_size;
        let random = [rng.gen::<f64>() < eps, rng.gen::<f64>() < eps, rng.gen::<f64>() < eps];
        let x: Tensor<T> = observation_batch(&[obs]);
        let heads = if random.iter().all(|&r| r) {
            None
        } else {
            Some(self.pick_forward(&x)?)
        };

        let pick = if random[0] {
            let nth = rng.gen_range(0..mask.count());
            mask.pixels().nth(nth).unwrap()
        } else {
            let (_, q1) = heads.as_ref().unwrap();
            let idx = masked_argmax(&q1.data, &mask.data).unwrap();
            snap_to_cloth(Pixel::new(idx / d, idx % d), mask, snap_radius).map_err(|_| NetError::EmptyMask)?
        };

        let place_head = match &heads {
            Some((g, _)) => {
                let crops = self.crops(&x, &[pick])?;
                Some((g, self.place_forward(g, &crops, &[pick])?))
            }
            None => None,
        };
        let place = if random[1] {
            Pixel::new(rng.gen_range(0..d), rng.gen_range(0..d))
        } else {
            let (_, (_, _, q2)) = place_head.as_ref().unwrap();
            let idx = argmax_first(&q2.data).unwrap();
            Pixel::new(idx / d, idx % d)
        };
        let theta = if random[2] {
            rng.gen_range(0..self.config.theta_bins)
        } else {
            let (g, (_, canvas, q2)) = place_head.as_ref().unwrap();
            let q3 = self.theta_forward(g, canvas, q2)?;
            argmax_first(&q3.data).unwrap()
        };
        Ok(ComposedAction {
            pick,
            place,
            theta,
            angle: obs.angle,
            valid: true,
        })
    }

    /// Tries the 13 rotations 0, 15, ..., 180 degrees, keeps the one whose masked
    /// Q1 maximum is highest (first on ties) and completes the greedy sequence there.
    pub fn eval_rotation_search(&self, obs: &Observation, snap_radius: usize) -> Result<RotationSearch, NetError> {
        let d = self.config.image_size;
        let views: Vec<Observation> = (0..ROTATION_COUNT)
            .map(|k| {
                if k == 0 {
                    obs.clone()
                } else {
                    rotate_observation(obs, k as f64 * ROTATION_STEP_DEG)
                }
            })
            .collect();
        let masks: Vec<Mask> = views.iter().map(cloth_mask).collect();
        let x: Tensor<T> = observation_batch(&views.iter().collect::<Vec<_>>());
        let (g_all, q1_all) = self.pick_forward(&x)?;

        let mut scores = Vec::with_capacity(ROTATION_COUNT);
        let mut best: Option<(usize, usize, f64)> = None;
        for (k, mask) in masks.iter().enumerate() {
            let angle = k as f64 * ROTATION_STEP_DEG;
            let vals = q1_all.sample(k);
            match masked_argmax(vals, &mask.data) {
                Some(idx) => {
                    let q = vals[idx].to_f64();
                    scores.push((angle, Some(q)));
                    if best.map_or(true, |(_, _, b)| q > b) {
                        best = Some((k, idx, q));
                    }
                }
                None => scores.push((angle, None)),
            }
        }
        let (k, idx, pick_q) = best.ok_or(NetError::EmptyMask)?;
        let pick = snap_to_cloth(Pixel::new(idx / d, idx % d), &masks[k], snap_radius)
            .map_err(|_| NetError::EmptyMask)?;

        let view: Tensor<T> = observation_batch(&[&views[k]]);
        let g = Tensor {
            shape: {
                let mut s = g_all.shape.clone();
                s[0] = 1;
                s
            },
            data: g_all.sample(k).to_vec(),
        };
        let crops = self.crops(&view, &[pick])?;
        let (_, canvas, q2) = self.place_forward(&g, &crops, &[pick])?;
        let pl = argmax_first(&q2.data).unwrap();
        let q3 = self.theta_forward(&g, &canvas, &q2)?;
        let theta = argmax_first(&q3.data).unwrap();
        Ok(RotationSearch {
            action: ComposedAction {
                pick,
                place: Pixel::new(pl / d, pl % d),
                theta,
                angle: k as f64 * ROTATION_STEP_DEG,
                valid: true,
            },
            pick_q,
            scores,
        })
    }

    pub fn manifest_json(&self) -> String {
        let m = Manifest {
            config: self.config.clone(),
            param_counts: [
                self.pick.param_count(),
                self.crop.param_count(),
                self.place.param_count(),
                self.theta.param_count(),
            ],
        };
        serde_json::to_string_pretty(&m).unwrap()
    }

    /// Magic, JSON architecture manifest, then the four parameter blobs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NET_MAGIC);
        let manifest = self.manifest_json();
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for g in self.graphs() {
            out.extend_from_slice(&encode_params(g));
        }
        out
    }

    /// Rebuilds a network from [`to_bytes`](Self::to_bytes). If `expected` is given the
    /// stored architecture must match it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&NetConfig>) -> Result<Self, NetError> {
        let err = |m: &str| NetError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != NET_MAGIC {
            return Err(err("not a network checkpoint (bad magic)"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = bytes
            .get(12..12 + len)
            .ok_or_else(|| err("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        if let Some(exp) = expected {
            if *exp != manifest.config {
                return Err(NetError::Checkpoint(format!(
                    "architecture mismatch: checkpoint has {:?}, config wants {:?}",
                    manifest.config, exp
                )));
            }
        }
        let mut net = Self::new(manifest.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut pos = 12 + len;
        for g in net.graphs_mut() {
            pos += decode_params_into(g, &bytes[pos..]).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes after parameter blobs"));
        }
        Ok(net)
    }
}

/// Adam state for the four graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetOptimizer {
    pub states: Vec<AdamState>,
}

impl NetOptimizer {
    pub fn new<T: Real>(net: &QdpNetwork<T>, lr: f64) -> Self {
        Self {
            states: net.graphs().iter().map(|g| AdamState::new(&g.params, lr)).collect(),
        }
    }

    pub fn step<T: Real>(&mut self, net: &mut QdpNetwork<T>, grads: &NetGrads<T>) -> Result<(), NetError> {
        if let Some((i, j)) = grads.graphs.iter().enumerate().find_map(|(i, g)| {
            g.iter().position(|t| !t.all_finite()).map(|j| (i, j))
        }) {
            return Err(NetError::NonFiniteGradient { graph: i, tensor: j });
        }
        for ((state, graph), g) in self.states.iter_mut().zip(net.graphs_mut()).zip(&grads.graphs) {
            state.update(&mut graph.params, g)?;
        }
        Ok(())
    }
}

/// Largest relative error between [`QdpNetwork::loss_and_grads`] and central
/// differences of the head losses over every parameter. The pooled Q2 seen by
/// the θ head is held at its unperturbed value, matching the stop-gradient.
pub fn composed_grad_check(
    net: &QdpNetwork<f64>,
    batch: &TrainBatch<f64>,
    y: &[f64],
    delta: f64,
    eps: f64,
) -> Result<f64, NetError> {
    let (_, grads) = net.loss_and_grads(batch, y, delta)?;
    composed_compare(net, batch, y, delta, eps, &grads)
}

/// Compares given gradients against central differences (used for fault injection).
pub fn composed_compare(
    net: &QdpNetwork<f64>,
    batch: &TrainBatch<f64>,
    y: &[f64],
    delta: f64,
    eps: f64,
    grads: &NetGrads<f64>,
) -> Result<f64, NetError> {
    let frozen = {
        let n = batch.obs.batch();
        let (g, _) = net.pick_forward(&batch.obs)?;
        let crops = net.crops(&batch.obs, &batch.picks)?;
        let (_, _, q2) = net.place_forward(&g, &crops, &batch.picks[..n])?;
        net.pool_q2(&q2)
    };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for gi in 0..4 {
        for p in 0..grads.graphs[gi].len() {
            for k in 0..grads.graphs[gi][p].len() {
                let orig = probe.graphs()[gi].params[p].data[k];
                let rel = fd_rel_error(grads.graphs[gi][p].data[k], eps, |h| {
                    probe.graphs_mut()[gi].params[p].data[k] = orig + h;
                    probe.head_losses_with(batch, y, delta, Some(&frozen)).map(|l| l.total)
                })?;
                probe.graphs_mut()[gi].params[p].data[k] = orig;
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}
