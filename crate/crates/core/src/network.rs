//! The TTDSR network.
//!
//! ```text
//! x ─► TCL (fixed 8x8 Tchebichef kernels) ─► 64-channel frequency cube
//!        ├─ channels 0..=T   ─► 5x5 conv ─► 1x1 conv                     (low)
//!        └─ channels T+1..63 ─► {3x3, 5x5, 7x7} convs ─► concat ─► 1x1
//!                               (+ the high slice itself, local residual) (high)
//!      concat ─► ITCL (trainable, initialised to the same kernels)
//!             ─► three 3x3 convs ─► + x (global residual)
//! ```
//!
//! Every conv except the 1x1 fusion and the last tail layer is followed by a
//! leaky ReLU. The ITCL is the transposed TCL scaled by 1/64: each pixel lies
//! in 64 overlapping 8x8 windows, so at initialisation ITCL∘TCL is the
//! identity away from the borders.

use ndarray::Array2;

use crate::autodiff::{
    adam_step, glorot_uniform_init, AdamConfig, AdamState, Checkpoint, Conv2dOptions, Tape, Tensor,
    Var,
};
use crate::data::bicubic_resize;
use crate::error::{invalid, Error, Result};
use crate::metrics::Upscaler;
use crate::plane::{ImagePlane, ValueRange};
use crate::tcheb::{tile_grid, TchebichefBasis, KERNEL_SIZE, NUM_KERNELS};

const ITCL_SCALE: f64 = 1.0 / NUM_KERNELS as f64;
const MODEL_TAG: &str = "ttdsr";

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Last channel of the low-frequency slice.
    pub split_point: usize,
    pub leaky_alpha: f64,
    pub low_kernel: usize,
    pub high_kernels: [usize; 3],
    /// Output channels of each parallel high-frequency branch.
    pub branch_width: usize,
    pub finetune_width: usize,
    pub local_residual: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            split_point: 5,
            leaky_alpha: 0.1,
            low_kernel: 5,
            high_kernels: [3, 5, 7],
            branch_width: 15,
            finetune_width: 32,
            local_residual: true,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=62).contains(&self.split_point) {
            return invalid(format!("split point {} outside [1, 62]", self.split_point));
        }
        if !(0.0..1.0).contains(&self.leaky_alpha) {
            return invalid(format!("leaky slope {} outside [0, 1)", self.leaky_alpha));
        }
        if self.low_kernel.is_multiple_of(2)
            || self.high_kernels.iter().any(|k| k.is_multiple_of(2))
        {
            return invalid("path kernel sizes must be odd");
        }
        if self.branch_width == 0 || self.finetune_width == 0 {
            return invalid("channel widths must be positive");
        }
        Ok(())
    }

    pub fn low_channels(&self) -> usize {
        self.split_point + 1
    }

    pub fn high_channels(&self) -> usize {
        NUM_KERNELS - self.low_channels()
    }

    fn to_metadata(&self) -> Vec<(String, String)> {
        let [k3, k5, k7] = self.high_kernels;
        vec![
            ("model".into(), MODEL_TAG.into()),
            ("split_point".into(), self.split_point.to_string()),
            ("leaky_alpha".into(), format!("{:e}", self.leaky_alpha)),
            ("low_kernel".into(), self.low_kernel.to_string()),
            ("high_kernels".into(), format!("{k3},{k5},{k7}")),
            ("branch_width".into(), self.branch_width.to_string()),
            ("finetune_width".into(), self.finetune_width.to_string()),
            ("local_residual".into(), self.local_residual.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        fn field<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
            ck.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing or malformed `{key}`")))
        }
        if ck.meta("model") != Some(MODEL_TAG) {
            return Err(Error::Checkpoint("not a TTDSR model checkpoint".into()));
        }
        let kernels: Vec<usize> = ck
            .meta("high_kernels")
            .unwrap_or_default()
            .split(',')
            .map(|k| k.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint("malformed `high_kernels`".into()))?;
        let high_kernels: [usize; 3] = kernels
            .try_into()
            .map_err(|_| Error::Checkpoint("`high_kernels` needs three sizes".into()))?;
        Ok(Self {
            split_point: field(ck, "split_point")?,
            leaky_alpha: field(ck, "leaky_alpha")?,
            low_kernel: field(ck, "low_kernel")?,
            high_kernels,
            branch_width: field(ck, "branch_width")?,
            finetune_width: field(ck, "finetune_width")?,
            local_residual: field(ck, "local_residual")?,
            seed: field(ck, "seed")?,
        })
    }
}

/// A `batch x 64 x H x W` stack of Tchebichef coefficients in zig-zag order,
/// with the low/high partition point.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyCube {
    pub tensor: Tensor,
    pub split_point: usize,
}

impl FrequencyCube {
    pub fn low_range(&self) -> std::ops::Range<usize> {
        0..self.split_point + 1
    }

    pub fn high_range(&self) -> std::ops::Range<usize> {
        self.split_point + 1..NUM_KERNELS
    }
}

/// Parameter names in the fixed order used for optimisation and checkpoints.
fn param_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let (lo, hi, bw, fw) = (
        cfg.low_channels(),
        cfg.high_channels(),
        cfg.branch_width,
        cfg.finetune_width,
    );
    let k = KERNEL_SIZE;
    let mut v = vec![
        (
            "low1.w".to_string(),
            vec![lo, lo, cfg.low_kernel, cfg.low_kernel],
        ),
        ("low1.b".to_string(), vec![lo]),
        ("low2.w".to_string(), vec![lo, lo, 1, 1]),
        ("low2.b".to_string(), vec![lo]),
    ];
    for ks in cfg.high_kernels {
        v.push((format!("high{ks}.w"), vec![bw, hi, ks, ks]));
        v.push((format!("high{ks}.b"), vec![bw]));
    }
    v.extend([
        ("fuse.w".to_string(), vec![hi, 3 * bw, 1, 1]),
        ("fuse.b".to_string(), vec![hi]),
        ("itcl.w".to_string(), vec![NUM_KERNELS, 1, k, k]),
        ("tail1.w".to_string(), vec![fw, 1, 3, 3]),
        ("tail1.b".to_string(), vec![fw]),
        ("tail2.w".to_string(), vec![fw, fw, 3, 3]),
        ("tail2.b".to_string(), vec![fw]),
        ("tail3.w".to_string(), vec![1, fw, 3, 3]),
        ("tail3.b".to_string(), vec![1]),
    ]);
    v
}

/// Variables recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Var,
    /// ITCL output before the fine-tuning tail.
    pub reconstruction: Var,
    pub cube: Var,
    /// One variable per entry of [`Ttdsr::params`], in the same order.
    pub params: Vec<Var>,
}

/// A TTDSR model: fixed TCL kernels plus every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Ttdsr {
    config: NetConfig,
    tcl: Tensor,
    params: Vec<(String, Tensor)>,
}

/// Builds a freshly initialised model: Glorot-uniform conv weights, zero
/// biases, ITCL equal to the basis kernels.
pub fn build_model(config: NetConfig, basis: &TchebichefBasis) -> Result<Ttdsr> {
    Ttdsr::new(config, basis)
}

impl Ttdsr {
    pub fn new(config: NetConfig, basis: &TchebichefBasis) -> Result<Self> {
        config.validate()?;
        let kernels = basis.kernel_weights()?;
        let tcl = Tensor::new(vec![NUM_KERNELS, 1, KERNEL_SIZE, KERNEL_SIZE], kernels)?;
        let params = param_layout(&config)
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let t = if name == "itcl.w" {
                    tcl.clone()
                } else if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    let seed = config
                        .seed
                        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                        .wrapping_add(i as u64);
                    glorot_uniform_init(&shape, seed)
                };
                (name, t)
            })
            .collect();
        let model = Self {
            config,
            tcl,
            params,
        };
        debug_assert_eq!(
            model.config.low_channels() + model.config.high_channels(),
            NUM_KERNELS
        );
        Ok(model)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// The fixed analysis kernels (`64 x 1 x 8 x 8`).
    pub fn tcl_weights(&self) -> &Tensor {
        &self.tcl
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Trainable parameters plus the fixed TCL kernels.
    pub fn total_parameter_count(&self) -> usize {
        self.trainable_parameter_count() + self.tcl.numel()
    }

    /// Names of the tensors covered by the weight penalty: every conv weight
    /// except the ITCL kernels.
    pub fn penalized(&self) -> impl Iterator<Item = usize> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| n.ends_with(".w") && n != "itcl.w")
            .map(|(i, _)| i)
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }

    /// Applies the fixed TCL to a `batch x 1 x H x W` tensor.
    pub fn frequency_cube(&self, input: &Tensor) -> Result<FrequencyCube> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let cube = self.tcl_on(&mut tape, x)?;
        Ok(FrequencyCube {
            tensor: tape.value(cube).clone(),
            split_point: self.config.split_point,
        })
    }

    fn tcl_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != 1 {
            return invalid(format!("expected a single-channel input, got {c} channels"));
        }
        if h < KERNEL_SIZE || w < KERNEL_SIZE {
            return invalid(format!(
                "input {h}x{w} smaller than {KERNEL_SIZE}x{KERNEL_SIZE}"
            ));
        }
        let tcl = tape.leaf(self.tcl.clone(), false);
        let frozen = Conv2dOptions {
            trainable: false,
            ..Default::default()
        };
        tape.conv2d(x, tcl, None, frozen)
    }

    /// Records the forward pass for `input` (`batch x 1 x H x W`, H, W >= 8).
    /// Parameters become leaves that require gradients when `train` is set.
    pub fn forward(&self, tape: &mut Tape, input: Var, train: bool) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let alpha = cfg.leaky_alpha;
        let cube = self.tcl_on(tape, input)?;
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), train))
            .collect();
        let by_name = |name: &str| {
            p[self
                .params
                .iter()
                .position(|(n, _)| n == name)
                .expect("known parameter")]
        };
        let conv = |tape: &mut Tape, x: Var, layer: &str| {
            tape.conv2d(
                x,
                by_name(&format!("{layer}.w")),
                Some(by_name(&format!("{layer}.b"))),
                Conv2dOptions::default(),
            )
        };

        let low = tape.slice_channels(cube, 0, cfg.low_channels())?;
        let high = tape.slice_channels(cube, cfg.low_channels(), NUM_KERNELS)?;

        let l = conv(tape, low, "low1")?;
        let l = tape.leaky_relu(l, alpha)?;
        let l = conv(tape, l, "low2")?;
        let low_out = tape.leaky_relu(l, alpha)?;

        let mut branches = Vec::with_capacity(3);
        for ks in cfg.high_kernels {
            let b = conv(tape, high, &format!("high{ks}"))?;
            branches.push(tape.leaky_relu(b, alpha)?);
        }
        let stacked = tape.concat_channels(&branches)?;
        let mut high_out = conv(tape, stacked, "fuse")?;
        if cfg.local_residual {
            high_out = tape.add(high_out, high)?;
        }

        let merged = tape.concat_channels(&[low_out, high_out])?;
        let itcl = tape.conv_transpose2d(merged, by_name("itcl.w"))?;
        let recon = tape.scale(itcl, ITCL_SCALE)?;

        let t = conv(tape, recon, "tail1")?;
        let t = tape.leaky_relu(t, alpha)?;
        let t = conv(tape, t, "tail2")?;
        let t = tape.leaky_relu(t, alpha)?;
        let t = conv(tape, t, "tail3")?;
        let output = tape.add(t, input)?;
        Ok(ForwardTrace {
            output,
            reconstruction: recon,
            cube,
            params: p,
        })
    }

    /// ITCL applied directly to the TCL cube of `input`, bypassing both
    /// paths; with the initial kernels this reproduces the input interior.
    pub fn transform_round_trip(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let cube = self.tcl_on(&mut tape, x)?;
        let w = tape.leaf(self.param("itcl.w").expect("itcl").clone(), false);
        let y = tape.conv_transpose2d(cube, w)?;
        let y = tape.scale(y, ITCL_SCALE)?;
        Ok(tape.value(y).clone())
    }

    /// Forward pass without gradients.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let trace = self.forward(&mut tape, x, false)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Loss `(1/M) sum ||F(lr) - hr||^2 + lambda * sum W^2` for a batch.
    pub fn loss(&self, lr: &Tensor, hr: &Tensor, lambda: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.record_loss(&mut tape, lr, hr, lambda, false)?;
        Ok(tape.value(loss).item())
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        lr: &Tensor,
        hr: &Tensor,
        lambda: f64,
        train: bool,
    ) -> Result<(Var, ForwardTrace)> {
        if lr.shape() != hr.shape() {
            return invalid(format!(
                "batch shapes differ: {:?} vs {:?}",
                lr.shape(),
                hr.shape()
            ));
        }
        let x = tape.leaf(lr.clone(), false);
        let trace = self.forward(tape, x, train)?;
        let y = tape.leaf(hr.clone(), false);
        let data = tape.mse_loss(trace.output, y)?;
        let weights: Vec<Var> = self.penalized().map(|i| trace.params[i]).collect();
        let penalty = tape.l2_penalty(&weights, lambda)?;
        Ok((tape.add(data, penalty)?, trace))
    }

    /// Gradient of the batch loss with respect to every parameter, in
    /// [`params`](Self::params) order, together with the loss.
    pub fn gradients(&self, lr: &Tensor, hr: &Tensor, lambda: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (loss, trace) = self.record_loss(&mut tape, lr, hr, lambda, true)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: 0,
                loss: value,
            });
        }
        tape.backward(loss)?;
        let grads = trace
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, (_, t))| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect();
        Ok((value, grads))
    }

    pub fn new_optimizer(&self, config: AdamConfig) -> Result<AdamState> {
        let sizes: Vec<usize> = self.params.iter().map(|(_, t)| t.numel()).collect();
        AdamState::new(config, &sizes)
    }

    /// One Adam step on a batch. Returns the loss before the update.
    pub fn training_step(
        &mut self,
        lr: &Tensor,
        hr: &Tensor,
        adam: &mut AdamState,
        lambda: f64,
    ) -> Result<f64> {
        let (loss, grads) = self.gradients(lr, hr, lambda).map_err(|e| match e {
            Error::Diverged { loss, .. } => Error::Diverged {
                step: adam.step_count() as usize,
                loss,
            },
            other => other,
        })?;
        for ((_, t), g) in self.params.iter_mut().zip(&grads) {
            t.clear_grad();
            t.accumulate_grad(g)?;
        }
        let mut refs: Vec<&mut Tensor> = self.params.iter_mut().map(|(_, t)| t).collect();
        let stepped = adam_step(&mut refs, adam);
        for (_, t) in &mut self.params {
            t.clear_grad();
        }
        stepped?;
        Ok(loss)
    }

    /// Runs the network over a unit-range plane, in overlapping tiles so
    /// large images stay within memory. Tiles overlap by more than the
    /// receptive field, so the result matches a single full-size pass.
    pub fn infer_plane(&self, plane: &ImagePlane) -> Result<ImagePlane> {
        const CORE: usize = 64;
        const MARGIN: usize = 16;
        if !self.all_finite() {
            return Err(Error::InvalidState(
                "model parameters are not finite".into(),
            ));
        }
        let (h, w) = plane.dims();
        if h < KERNEL_SIZE || w < KERNEL_SIZE {
            return invalid(format!(
                "image {h}x{w} smaller than {KERNEL_SIZE}x{KERNEL_SIZE}"
            ));
        }
        let src = plane.pixels();
        let mut out = Array2::<f64>::zeros((h, w));
        for top in (0..h).step_by(CORE) {
            for left in (0..w).step_by(CORE) {
                let (r0, c0) = (top.saturating_sub(MARGIN), left.saturating_sub(MARGIN));
                let r1 = (top + CORE + MARGIN).min(h);
                let c1 = (left + CORE + MARGIN).min(w);
                let tile: Vec<f64> = src
                    .slice(ndarray::s![r0..r1, c0..c1])
                    .iter()
                    .copied()
                    .collect();
                let y = self.infer(&Tensor::new(vec![1, 1, r1 - r0, c1 - c0], tile)?)?;
                let tw = c1 - c0;
                for r in top..(top + CORE).min(h) {
                    for c in left..(left + CORE).min(w) {
                        out[[r, c]] = y.data()[(r - r0) * tw + (c - c0)];
                    }
                }
            }
        }
        ImagePlane::new(out, plane.value_range())
    }

    /// Enlarges `lr` by `scale` with bicubic interpolation and refines the
    /// result. The output is clamped to the input's value range.
    pub fn super_resolve(&self, lr: &ImagePlane, scale: usize) -> Result<ImagePlane> {
        if !(2..=4).contains(&scale) {
            return invalid(format!("scale {scale} not in 2..=4"));
        }
        let range = lr.value_range();
        let unit = lr.rescaled(ValueRange::UNIT);
        let up = bicubic_resize(&unit, lr.height() * scale, lr.width() * scale)?.clamped();
        Ok(self.infer_plane(&up)?.clamped().rescaled(range))
    }

    /// Learned ITCL kernels as a grid of 8 columns (one tile per kernel,
    /// zig-zag order, individually normalised).
    pub fn itcl_kernel_image(&self) -> Result<ImagePlane> {
        let w = self.param("itcl.w").expect("itcl");
        let kernels: Vec<Array2<f64>> = w
            .data()
            .chunks_exact(KERNEL_SIZE * KERNEL_SIZE)
            .map(|c| Array2::from_shape_vec((KERNEL_SIZE, KERNEL_SIZE), c.to_vec()).expect("8x8"))
            .collect();
        tile_grid(&kernels, KERNEL_SIZE)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            metadata: self.config.to_metadata(),
            tensors: self.params.clone(),
        }
    }

    /// Restores a model; the TCL kernels are regenerated from `basis`.
    pub fn from_checkpoint(ck: &Checkpoint, basis: &TchebichefBasis) -> Result<Self> {
        let config = NetConfig::from_checkpoint(ck)?;
        let mut model = Self::new(config, basis)?;
        for (name, t) in &mut model.params {
            let stored = ck
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored.clone();
        }
        Ok(model)
    }
}

impl Upscaler for Ttdsr {
    fn name(&self) -> &str {
        MODEL_TAG
    }

    fn enhance(&self, upsampled: &ImagePlane) -> Result<ImagePlane> {
        Ok(self
            .infer_plane(&upsampled.rescaled(ValueRange::UNIT))?
            .clamped())
    }
}

/// Stacks equally sized planes into a `batch x 1 x H x W` tensor.
pub fn stack_planes<'a>(planes: impl IntoIterator<Item = &'a ImagePlane>) -> Result<Tensor> {
    let mut dims = None;
    let mut data = Vec::new();
    let mut n = 0;
    for p in planes {
        match dims {
            None => dims = Some(p.dims()),
            Some(d) if d != p.dims() => {
                return invalid(format!("plane {:?} in a batch of {d:?}", p.dims()))
            }
            _ => {}
        }
        data.extend(p.pixels().iter());
        n += 1;
    }
    let Some((h, w)) = dims else {
        return invalid("empty batch");
    };
    Tensor::new(vec![n, 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcheb::make_basis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis() -> TchebichefBasis {
        make_basis(8).unwrap()
    }

    fn tiny() -> NetConfig {
        NetConfig {
            split_point: 1,
            branch_width: 2,
            finetune_width: 2,
            seed: 11,
            ..Default::default()
        }
    }

    fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![n, 1, h, w],
            (0..n * h * w).map(|_| rng.random()).collect(),
        )
        .unwrap()
    }

    fn zero_tail(m: &mut Ttdsr) {
        for name in [
            "tail1.w", "tail1.b", "tail2.w", "tail2.b", "tail3.w", "tail3.b",
        ] {
            m.param_mut(name).unwrap().data_mut().fill(0.0);
        }
    }

    #[test]
    fn default_parameter_budget() {
        let m = build_model(NetConfig::default(), &basis()).unwrap();
        assert_eq!(m.trainable_parameter_count(), 89_824);
        assert_eq!(m.total_parameter_count(), 93_920);
        assert!((60_000..=120_000).contains(&m.trainable_parameter_count()));
    }

    #[test]
    fn itcl_starts_at_the_basis_kernels() {
        let b = basis();
        let m = build_model(NetConfig::default(), &b).unwrap();
        assert_eq!(
            m.param("itcl.w").unwrap().data(),
            b.kernel_weights().unwrap().as_slice()
        );
        assert_eq!(
            m.tcl_weights().data(),
            b.kernel_weights().unwrap().as_slice()
        );
        assert!(m
            .params()
            .iter()
            .filter(|(n, _)| n.ends_with(".b"))
            .all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn seeded_construction_is_reproducible() {
        let b = basis();
        let a = build_model(NetConfig::default(), &b).unwrap();
        let c = build_model(NetConfig::default(), &b).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), c.to_checkpoint().to_bytes());
        let d = build_model(
            NetConfig {
                seed: 1,
                ..Default::default()
            },
            &b,
        )
        .unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn rejects_bad_configs() {
        let b = basis();
        for cfg in [
            NetConfig {
                split_point: 0,
                ..Default::default()
            },
            NetConfig {
                split_point: 63,
                ..Default::default()
            },
            NetConfig {
                high_kernels: [3, 4, 7],
                ..Default::default()
            },
            NetConfig {
                leaky_alpha: 1.0,
                ..Default::default()
            },
        ] {
            assert!(build_model(cfg, &b).is_err());
        }
        assert!(build_model(NetConfig::default(), &make_basis(4).unwrap()).is_err());
    }

    #[test]
    fn round_trip_reconstructs_interior() {
        let m = build_model(NetConfig::default(), &basis()).unwrap();
        let x = random_batch(2, 20, 23, 1);
        let y = m.transform_round_trip(&x).unwrap();
        let (h, w) = (20, 23);
        let mut worst: f64 = 0.0;
        for n in 0..2 {
            for r in 7..h - 7 {
                for c in 7..w - 7 {
                    let i = (n * h + r) * w + c;
                    worst = worst.max((y.data()[i] - x.data()[i]).abs());
                }
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn zeroed_tail_passes_input_through() {
        let mut m = build_model(NetConfig::default(), &basis()).unwrap();
        zero_tail(&mut m);
        let x = random_batch(1, 12, 12, 2);
        assert_eq!(m.infer(&x).unwrap(), x);
        // Identical LR and HR: the loss is then the weight penalty alone.
        let loss = m.loss(&x, &x, 0.0).unwrap();
        assert!(loss < 0.01, "{loss}");
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn shape_and_zero_input() {
        let m = build_model(NetConfig::default(), &basis()).unwrap();
        let x = random_batch(2, 9, 14, 3);
        assert_eq!(m.infer(&x).unwrap().shape(), &[2, 1, 9, 14]);
        let z = Tensor::zeros(&[1, 1, 10, 10]);
        let y = m.infer(&z).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        // No biases have been trained, so a black image stays black.
        assert!(y.data().iter().all(|v| *v == 0.0));
        assert!(m.infer(&Tensor::zeros(&[1, 1, 7, 10])).is_err());
    }

    #[test]
    fn local_residual_changes_outputs() {
        let b = basis();
        let with = build_model(NetConfig::default(), &b).unwrap();
        let without = build_model(
            NetConfig {
                local_residual: false,
                ..Default::default()
            },
            &b,
        )
        .unwrap();
        assert_eq!(with.params(), without.params());
        let x = random_batch(1, 12, 12, 4);
        assert_ne!(with.infer(&x).unwrap(), without.infer(&x).unwrap());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut m = build_model(tiny(), &basis()).unwrap();
        // Non-zero biases so their gradients are exercised away from zero.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, t) in &mut m.params {
            if name.ends_with(".b") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        let lr = random_batch(2, 8, 8, 6);
        let hr = random_batch(2, 8, 8, 7);
        let lambda = 0.01;
        let (_, grads) = m.gradients(&lr, &hr, lambda).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for pi in 0..m.params.len() {
            let n = m.params[pi].1.numel();
            // Every element for small tensors, a spread sample for big ones.
            let picks: Vec<usize> = if n <= 40 {
                (0..n).collect()
            } else {
                (0..n).step_by(n / 40 + 1).collect()
            };
            for i in picks {
                let orig = m.params[pi].1.data()[i];
                m.params[pi].1.data_mut()[i] = orig + h;
                let up = m.loss(&lr, &hr, lambda).unwrap();
                m.params[pi].1.data_mut()[i] = orig - h;
                let down = m.loss(&lr, &hr, lambda).unwrap();
                m.params[pi].1.data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[pi][i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-3,
                    "{} [{i}]: {analytic} vs {numeric}",
                    m.params[pi].0
                );
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn training_moves_itcl_but_not_tcl() {
        let mut m = build_model(tiny(), &basis()).unwrap();
        let before_tcl = m.tcl_weights().clone();
        let before_itcl = m.param("itcl.w").unwrap().clone();
        let mut adam = m.new_optimizer(AdamConfig::default()).unwrap();
        let lr = random_batch(4, 10, 10, 8);
        let hr = random_batch(4, 10, 10, 9);
        m.training_step(&lr, &hr, &mut adam, 0.01).unwrap();
        assert_eq!(m.tcl_weights(), &before_tcl);
        assert_ne!(m.param("itcl.w").unwrap(), &before_itcl);
        assert!(m.params().iter().all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn loss_is_zero_for_a_perfect_fit() {
        let mut m = build_model(tiny(), &basis()).unwrap();
        zero_tail(&mut m);
        let x = random_batch(3, 9, 9, 10);
        assert_eq!(m.loss(&x, &x, 0.0).unwrap(), 0.0);
        assert!(m.loss(&x, &random_batch(3, 9, 9, 11), 0.0).unwrap() > 0.0);
        assert!(m.loss(&x, &random_batch(3, 9, 8, 11), 0.0).is_err());
    }

    #[test]
    fn optimisation_makes_progress() {
        let mut m = build_model(NetConfig::default(), &basis()).unwrap();
        let mut adam = m.new_optimizer(AdamConfig::default()).unwrap();
        let hr = random_batch(16, 12, 12, 12);
        let lr = Tensor::new(
            hr.shape().to_vec(),
            hr.data().iter().map(|v| 0.8 * v + 0.1).collect(),
        )
        .unwrap();
        let first = m.training_step(&lr, &hr, &mut adam, 0.01).unwrap();
        let mut last = first;
        for _ in 0..19 {
            last = m.training_step(&lr, &hr, &mut adam, 0.01).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn diverged_loss_is_reported() {
        let mut m = build_model(tiny(), &basis()).unwrap();
        m.param_mut("tail3.b").unwrap().data_mut()[0] = f64::INFINITY;
        let mut adam = m.new_optimizer(AdamConfig::default()).unwrap();
        let x = random_batch(1, 8, 8, 13);
        assert!(matches!(
            m.training_step(&x, &x, &mut adam, 0.01),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn tiled_inference_matches_single_pass() {
        let m = build_model(tiny(), &basis()).unwrap();
        let x = random_batch(1, 150, 70, 14);
        let plane = ImagePlane::from_vec(150, 70, x.data().to_vec(), ValueRange::UNIT).unwrap();
        let tiled = m.infer_plane(&plane).unwrap();
        let full = m.infer(&x).unwrap();
        let diff = tiled
            .pixels()
            .iter()
            .zip(full.data())
            .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn super_resolve_shape_and_checkpoint_round_trip() {
        let b = basis();
        let m = build_model(tiny(), &b).unwrap();
        let lr = ImagePlane::filled(10, 12, 128.0, ValueRange::EIGHT_BIT);
        let sr = m.super_resolve(&lr, 3).unwrap();
        assert_eq!(sr.dims(), (30, 36));
        assert_eq!(sr.value_range(), ValueRange::EIGHT_BIT);
        assert!(m.super_resolve(&lr, 5).is_err());

        let back = Ttdsr::from_checkpoint(
            &Checkpoint::read_from(m.to_checkpoint().to_bytes().as_slice()).unwrap(),
            &b,
        )
        .unwrap();
        assert_eq!(back, m);
        let mut bad = m.clone();
        bad.param_mut("low1.w").unwrap().data_mut()[0] = f64::NAN;
        assert!(matches!(
            bad.super_resolve(&lr, 2),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn kernel_image_layout() {
        let m = build_model(tiny(), &basis()).unwrap();
        let img = m.itcl_kernel_image().unwrap();
        assert_eq!(img.dims(), (71, 71));
        // The DC tile is flat.
        let dc = img.crop(0, 0, 8, 8).unwrap();
        assert!(dc.pixels().iter().all(|v| *v == dc.get(0, 0)));
    }
}
