use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    max_pool2, max_pool2_backward, relu_backward, relu_inplace, BatchNorm2d, BnCache, Conv2d,
    ConvTranspose2x2, Param,
};
use super::tensor::Tensor;
use super::{ArchitectureSpec, Mode};
use crate::error::{Error, Result};

/// conv → optional batchnorm → ReLU
#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    units: Vec<ConvUnit>,
}

impl ConvBlock {
    fn new(prefix: &str, in_ch: usize, out_ch: usize, spec: &ArchitectureSpec, rng: &mut ChaCha8Rng) -> Self {
        let units = (0..spec.convs_per_block)
            .map(|j| {
                let cin = if j == 0 { in_ch } else { out_ch };
                ConvUnit {
                    conv: Conv2d::new(&format!("{prefix}.conv{j}"), cin, out_ch, 3, rng),
                    bn: spec
                        .use_batchnorm
                        .then(|| BatchNorm2d::new(&format!("{prefix}.bn{j}"), out_ch)),
                }
            })
            .collect();
        Self { units }
    }
}

/// Per-layer activations recorded by a training forward pass.
#[derive(Debug)]
enum Record {
    Unit {
        input: Tensor,
        bn: Option<BnCache>,
        output: Tensor,
    },
    Pool {
        arg: Vec<u8>,
        in_h: usize,
        in_w: usize,
    },
    Up {
        input: Tensor,
    },
    Head {
        input: Tensor,
    },
}

/// Activations needed by [`UNet::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
}

/// U-Net encoder/decoder with skip concatenation.
#[derive(Clone, Debug)]
pub struct UNet {
    spec: ArchitectureSpec,
    encoders: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    /// `ups[i]` and `decoders[i]` belong to depth `i` (0 = full resolution).
    ups: Vec<ConvTranspose2x2>,
    decoders: Vec<ConvBlock>,
    head: Conv2d,
}

impl UNet {
    /// Builds a freshly initialized network. `init_seed` drives the weight RNG.
    pub fn new(spec: &ArchitectureSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut encoders = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &w) in spec.encoder_widths.iter().enumerate() {
            encoders.push(ConvBlock::new(&format!("enc{i}"), cin, w, spec, &mut rng));
            cin = w;
        }
        let bottleneck = ConvBlock::new("bottleneck", cin, spec.bottleneck_width, spec, &mut rng);
        let depth = spec.depth();
        let mut ups: Vec<Option<ConvTranspose2x2>> = vec![None; depth];
        let mut decoders: Vec<Option<ConvBlock>> = vec![None; depth];
        let mut below = spec.bottleneck_width;
        for i in (0..depth).rev() {
            let w = spec.encoder_widths[i];
            ups[i] = Some(ConvTranspose2x2::new(&format!("up{i}"), below, w, &mut rng));
            decoders[i] = Some(ConvBlock::new(&format!("dec{i}"), 2 * w, w, spec, &mut rng));
            below = w;
        }
        let head = Conv2d::new("head", spec.encoder_widths[0], spec.num_classes, 1, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            encoders,
            bottleneck,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            decoders: decoders.into_iter().map(Option::unwrap).collect(),
            head,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let align = 1usize << self.spec.depth();
        if x.channels != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                x.channels, self.spec.in_channels
            )));
        }
        if x.batch == 0 || x.height == 0 || x.width == 0 {
            return Err(Error::Shape(format!("empty input {:?}", x.shape())));
        }
        if x.height % align != 0 || x.width % align != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {align}",
                x.height, x.width
            )));
        }
        Ok(())
    }

    /// Logits of shape B×K×H×W.
    ///
    /// `Mode::Eval` uses running normalization statistics and is
    /// deterministic. `Mode::Train` normalizes with batch statistics but
    /// leaves the running statistics untouched; use
    /// [`UNet::forward_train`] to record a tape and update them.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.run(x.clone(), mode, None))
    }

    /// Training forward pass: batch statistics, running-stat update and a
    /// tape for [`UNet::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let mut tape = Tape::default();
        let out = self.run(x.clone(), Mode::Train, Some(&mut tape));
        let mut caches = tape.records.iter().filter_map(|r| match r {
            Record::Unit { bn: Some(c), .. } => Some(c),
            _ => None,
        });
        for unit in self.units_in_forward_order_mut() {
            if let Some(bn) = unit.bn.as_mut() {
                bn.update_running(caches.next().expect("one cache per normalization layer"));
            }
        }
        Ok((out, tape))
    }

    fn units_in_forward_order_mut(&mut self) -> Vec<&mut ConvUnit> {
        let mut out: Vec<&mut ConvUnit> = Vec::new();
        for b in &mut self.encoders {
            out.extend(b.units.iter_mut());
        }
        out.extend(self.bottleneck.units.iter_mut());
        for b in self.decoders.iter_mut().rev() {
            out.extend(b.units.iter_mut());
        }
        out
    }

    fn run_block(block: &ConvBlock, mut x: Tensor, mode: Mode, mut tape: Option<&mut Tape>) -> Tensor {
        for unit in &block.units {
            let mut y = unit.conv.forward(&x);
            let cache = match (&unit.bn, mode) {
                (Some(bn), Mode::Train) => Some(bn.forward_train(&mut y)),
                (Some(bn), Mode::Eval) => {
                    bn.forward_eval(&mut y);
                    None
                }
                (None, _) => None,
            };
            relu_inplace(&mut y);
            if let Some(t) = tape.as_deref_mut() {
                t.records.push(Record::Unit {
                    input: x,
                    bn: cache,
                    output: y.clone(),
                });
            }
            x = y;
        }
        x
    }

    fn run(&self, mut x: Tensor, mode: Mode, mut tape: Option<&mut Tape>) -> Tensor {
        let mut skips = Vec::with_capacity(self.spec.depth());
        for enc in &self.encoders {
            let s = Self::run_block(enc, x, mode, tape.as_deref_mut());
            let (pooled, arg) = max_pool2(&s);
            if let Some(t) = tape.as_deref_mut() {
                t.records.push(Record::Pool {
                    arg,
                    in_h: s.height,
                    in_w: s.width,
                });
            }
            skips.push(s);
            x = pooled;
        }
        x = Self::run_block(&self.bottleneck, x, mode, tape.as_deref_mut());
        for i in (0..self.spec.depth()).rev() {
            let u = self.ups[i].forward(&x);
            if let Some(t) = tape.as_deref_mut() {
                t.records.push(Record::Up { input: x });
            }
            let cat = Tensor::concat_channels(&skips[i], &u);
            x = Self::run_block(&self.decoders[i], cat, mode, tape.as_deref_mut());
        }
        let out = self.head.forward(&x);
        if let Some(t) = tape {
            t.records.push(Record::Head { input: x });
        }
        out
    }

    fn backward_block(block: &mut ConvBlock, tape: &mut Tape, mut dy: Tensor, need_input_grad: bool) -> Option<Tensor> {
        let n = block.units.len();
        for (j, unit) in block.units.iter_mut().enumerate().rev() {
            let Some(Record::Unit { input, bn, output }) = tape.records.pop() else {
                panic!("tape out of sync: expected conv unit");
            };
            relu_backward(&output, &mut dy);
            if let (Some(layer), Some(cache)) = (unit.bn.as_mut(), bn.as_ref()) {
                layer.backward(cache, &mut dy);
            }
            let last = j == 0;
            match unit.conv.backward(&input, &dy, !last || need_input_grad) {
                Some(dx) => dy = dx,
                None => {
                    debug_assert!(last && n > 0);
                    return None;
                }
            }
        }
        Some(dy)
    }

    /// Accumulates parameter gradients for `d_logits` (gradient of the loss
    /// with respect to the logits returned by [`UNet::forward_train`]).
    pub fn backward(&mut self, mut tape: Tape, d_logits: &Tensor) {
        let Some(Record::Head { input }) = tape.records.pop() else {
            panic!("tape out of sync: expected head");
        };
        let mut dx = self.head.backward(&input, d_logits, true).expect("head input grad");
        let depth = self.spec.depth();
        let mut skip_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for i in 0..depth {
            let dcat = Self::backward_block(&mut self.decoders[i], &mut tape, dx, true).expect("decoder grad");
            let (dskip, du) = dcat.split_channels(self.spec.encoder_widths[i]);
            let Some(Record::Up { input }) = tape.records.pop() else {
                panic!("tape out of sync: expected upsampling");
            };
            dx = self.ups[i].backward(&input, &du);
            skip_grads[i] = Some(dskip);
        }
        dx = Self::backward_block(&mut self.bottleneck, &mut tape, dx, true).expect("bottleneck grad");
        for i in (0..depth).rev() {
            let Some(Record::Pool { arg, in_h, in_w }) = tape.records.pop() else {
                panic!("tape out of sync: expected pooling");
            };
            let mut ds = max_pool2_backward(&dx, &arg, in_h, in_w);
            let skip = skip_grads[i].take().expect("skip grad");
            ds.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
            match Self::backward_block(&mut self.encoders[i], &mut tape, ds, i > 0) {
                Some(next) => dx = next,
                None => break,
            }
        }
        debug_assert!(tape.records.is_empty());
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        fn push_block<'a>(b: &'a ConvBlock, out: &mut Vec<&'a Param>) {
            for u in &b.units {
                out.push(&u.conv.weight);
                out.push(&u.conv.bias);
                if let Some(bn) = &u.bn {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
            }
        }
        for b in &self.encoders {
            push_block(b, &mut out);
        }
        push_block(&self.bottleneck, &mut out);
        for i in (0..self.spec.depth()).rev() {
            out.push(&self.ups[i].weight);
            out.push(&self.ups[i].bias);
            push_block(&self.decoders[i], &mut out);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        fn push_block<'a>(b: &'a mut ConvBlock, out: &mut Vec<&'a mut Param>) {
            for u in &mut b.units {
                out.push(&mut u.conv.weight);
                out.push(&mut u.conv.bias);
                if let Some(bn) = &mut u.bn {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
            }
        }
        for b in &mut self.encoders {
            push_block(b, &mut out);
        }
        push_block(&mut self.bottleneck, &mut out);
        let depth = self.spec.depth();
        let ups: Vec<&mut ConvTranspose2x2> = self.ups.iter_mut().collect();
        let decs: Vec<&mut ConvBlock> = self.decoders.iter_mut().collect();
        let mut pairs: Vec<_> = ups.into_iter().zip(decs).collect();
        for _ in 0..depth {
            let (up, dec) = pairs.pop().expect("depth pairs");
            out.push(&mut up.weight);
            out.push(&mut up.bias);
            push_block(dec, &mut out);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Every stored tensor (trainable parameters, then normalization running
    /// statistics) as `(name, shape, values)` in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.value.as_slice()))
            .collect();
        for (prefix, bn) in self.batchnorms() {
            out.push((format!("{prefix}.running_mean"), vec![bn.channels], &bn.running_mean));
            out.push((format!("{prefix}.running_var"), vec![bn.channels], &bn.running_var));
        }
        out
    }

    fn batchnorms(&self) -> Vec<(String, &BatchNorm2d)> {
        let mut blocks: Vec<&ConvBlock> = self.encoders.iter().collect();
        blocks.push(&self.bottleneck);
        blocks.extend(self.decoders.iter().rev());
        blocks
            .into_iter()
            .flat_map(|b| b.units.iter())
            .filter_map(|u| u.bn.as_ref())
            .map(|bn| (bn.gamma.name.trim_end_matches(".weight").to_string(), bn))
            .collect()
    }

    /// Overwrites every tensor by name; shapes must match exactly.
    pub(crate) fn assign_tensors(&mut self, mut tensors: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let (s, v) = tensors
                .remove(name)
                .ok_or_else(|| Error::Shape(format!("weights file lacks tensor {name}")))?;
            if s != shape {
                return Err(Error::Shape(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
            }
            Ok(v)
        };
        for p in self.params_mut() {
            let shape = p.shape.clone();
            p.value = take(&p.name, &shape)?;
        }
        for unit in self.units_in_forward_order_mut() {
            if let Some(bn) = unit.bn.as_mut() {
                let prefix = bn.gamma.name.trim_end_matches(".weight").to_string();
                bn.running_mean = take(&format!("{prefix}.running_mean"), &[bn.channels])?;
                bn.running_var = take(&format!("{prefix}.running_var"), &[bn.channels])?;
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Shape(format!("unexpected tensor {extra} in weights file")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ArchitectureSpec {
        ArchitectureSpec {
            in_channels: 3,
            num_classes: 2,
            encoder_widths: vec![4, 8],
            bottleneck_width: 16,
            convs_per_block: 1,
            use_batchnorm: true,
        }
    }

    fn input(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..b * c * h * w).map(|i| ((i as f32) * 0.713).sin()).collect();
        Tensor::new(b, c, h, w, data).unwrap()
    }

    #[test]
    fn toy_runs_on_16x16() {
        let model = UNet::new(&toy(), 0).unwrap();
        let out = model.forward(&input(2, 3, 16, 16), Mode::Eval).unwrap();
        assert_eq!(out.shape(), [2, 2, 16, 16]);
        assert!(out.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let model = UNet::new(&toy(), 0).unwrap();
        assert!(model.forward(&input(1, 3, 15, 16), Mode::Eval).is_err());
        assert!(model.forward(&input(1, 2, 16, 16), Mode::Eval).is_err());
    }

    #[test]
    fn tensor_names_are_unique() {
        let mut spec = toy();
        spec.convs_per_block = 2;
        let model = UNet::new(&spec, 0).unwrap();
        let names: Vec<_> = model.named_tensors().into_iter().map(|t| t.0).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"dec1.bn1.running_var".to_string()));
    }

    #[test]
    fn params_and_params_mut_agree() {
        let mut model = UNet::new(&toy(), 0).unwrap();
        let a: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        let b: Vec<String> = model.params_mut().iter().map(|p| p.name.clone()).collect();
        assert_eq!(a, b);
    }

    /// Whole-network finite-difference check on a loss of sum(logits * probe).
    #[test]
    fn network_gradient_matches_finite_differences() {
        for bn in [false, true] {
            let mut spec = toy();
            spec.use_batchnorm = bn;
            spec.convs_per_block = 2;
            let mut model = UNet::new(&spec, 3).unwrap();
            // zero biases put dead pixels exactly on the ReLU kink
            for p in model.params_mut() {
                if p.name.ends_with("bias") {
                    for (i, v) in p.value.iter_mut().enumerate() {
                        *v = 0.1 * ((i as f32) * 1.7 + 0.3).sin();
                    }
                }
            }
            let x = input(2, 3, 8, 8);
            let probe = input(2, 2, 8, 8);
            let loss = |m: &UNet| -> f64 {
                let y = m.forward(&x, Mode::Train).unwrap();
                y.data.iter().zip(&probe.data).map(|(a, b)| *a as f64 * *b as f64).sum()
            };
            model.zero_grad();
            let (_, tape) = model.forward_train(&x).unwrap();
            model.backward(tape, &probe);
            let eps = 1e-3f32;
            let mut checked = 0;
            let mut bad = 0;
            let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
            for (pi, name) in names.iter().enumerate() {
                let len = model.params()[pi].len();
                for idx in (0..len).step_by((len / 5).max(1)) {
                    let analytic = model.params()[pi].grad[idx] as f64;
                    let mut plus = model.clone();
                    plus.params_mut()[pi].value[idx] += eps;
                    let mut minus = model.clone();
                    minus.params_mut()[pi].value[idx] -= eps;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps as f64);
                    checked += 1;
                    if (fd - analytic).abs() > 5e-2 * (1.0 + fd.abs().max(analytic.abs())) {
                        bad += 1;
                        eprintln!("bn={bn} {name}[{idx}] fd={fd} analytic={analytic}");
                    }
                }
            }
            // ReLU/max-pool kinks can flip a handful of finite differences
            assert!(bad * 20 <= checked, "{bad}/{checked} mismatches (bn={bn})");
        }
    }

    #[test]
    fn train_forward_updates_running_stats_only_via_forward_train() {
        let mut model = UNet::new(&toy(), 1).unwrap();
        let x = input(2, 3, 16, 16);
        let before = model.forward(&x, Mode::Eval).unwrap();
        model.forward(&x, Mode::Train).unwrap();
        assert_eq!(model.forward(&x, Mode::Eval).unwrap(), before);
        model.forward_train(&x).unwrap();
        assert_ne!(model.forward(&x, Mode::Eval).unwrap(), before);
    }
}
