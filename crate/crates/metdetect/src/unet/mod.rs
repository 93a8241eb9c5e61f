//! The segmentation network: a U-Net over axial slice slabs.
//!
//! The contracting path alternates two 3x3 convolutions (ReLU) with 2x2 max
//! pooling, doubling the feature count per level; the expansive path mirrors
//! it with upsampling convolutions and skip concatenations, and a final 1x1
//! convolution produces two-channel logits (background, foreground).

mod checkpoint;
mod input;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use input::{assemble_input, prepare_case, Arm, InputConfiguration, PreparedCase};

use crate::case::Case;
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, softmax_channels, upconv2, upconv2_backward,
    MaxPoolIndices, Padding, Tensor4,
};
use crate::volume::Volume;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

impl ConvParams {
    fn he_init(oc: usize, ic: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (ic * kh * kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let n = oc * ic * kh * kw;
        let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Tensor4::from_vec([oc, ic, kh, kw], data).expect("init shape"),
            bias: vec![0.0; oc],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub up: ConvParams,
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

/// U-Net with its input configuration embedded, so checkpoints are
/// self-describing.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub input: InputConfiguration,
    pub base_features: usize,
    /// Number of pooling steps; input spatial dims must divide 2^depth.
    pub depth: usize,
    pub seed: u64,
    pub enc: Vec<[ConvParams; 2]>,
    pub dec: Vec<DecoderBlock>,
    pub final_conv: ConvParams,
}

/// Builds a seeded He-initialized U-Net for one experiment arm.
pub fn build_unet(
    config: &InputConfiguration,
    base_features: usize,
    depth: usize,
    seed: u64,
) -> Result<UNet> {
    if base_features < 2 {
        return Err(Error::Parameter(format!(
            "base_features must be >= 2, got {base_features}"
        )));
    }
    if depth < 2 {
        return Err(Error::Parameter(format!("depth must be >= 2, got {depth}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = |level: usize| base_features << level;

    let mut enc = Vec::with_capacity(depth + 1);
    for level in 0..=depth {
        let ic = if level == 0 {
            config.channels()
        } else {
            feat(level - 1)
        };
        let f = feat(level);
        enc.push([
            ConvParams::he_init(f, ic, 3, 3, &mut rng),
            ConvParams::he_init(f, f, 3, 3, &mut rng),
        ]);
    }
    let mut dec = Vec::with_capacity(depth);
    for level in (0..depth).rev() {
        let f = feat(level);
        dec.push(DecoderBlock {
            up: ConvParams::he_init(f, feat(level + 1), 3, 3, &mut rng),
            conv1: ConvParams::he_init(f, 2 * f, 3, 3, &mut rng),
            conv2: ConvParams::he_init(f, f, 3, 3, &mut rng),
        });
    }
    let final_conv = ConvParams::he_init(2, base_features, 1, 1, &mut rng);
    Ok(UNet {
        input: config.clone(),
        base_features,
        depth,
        seed,
        enc,
        dec,
        final_conv,
    })
}

impl UNet {
    /// Decoder block index handling level `level` (blocks run bottom-up).
    fn dec_index(&self, level: usize) -> usize {
        self.depth - 1 - level
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by 2^depth = {m}; pad the grid to a multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Deterministic iteration over named parameter blocks.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(&str, &'a ConvParams)) {
        for (i, level) in self.enc.iter().enumerate() {
            f(&format!("enc{i}.conv1"), &level[0]);
            f(&format!("enc{i}.conv2"), &level[1]);
        }
        for (i, block) in self.dec.iter().enumerate() {
            f(&format!("dec{i}.up"), &block.up);
            f(&format!("dec{i}.conv1"), &block.conv1);
            f(&format!("dec{i}.conv2"), &block.conv2);
        }
        f("final", &self.final_conv);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut ConvParams)) {
        for (i, level) in self.enc.iter_mut().enumerate() {
            f(&format!("enc{i}.conv1"), &mut level[0]);
            f(&format!("enc{i}.conv2"), &mut level[1]);
        }
        for (i, block) in self.dec.iter_mut().enumerate() {
            f(&format!("dec{i}.up"), &mut block.up);
            f(&format!("dec{i}.conv1"), &mut block.conv1);
            f(&format!("dec{i}.conv2"), &mut block.conv2);
        }
        f("final", &mut self.final_conv);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, p| n += p.weights.numel() + p.bias.len());
        n
    }
}

struct ConvStash {
    input: Tensor4,
    pre_relu: Tensor4,
}

/// Everything the backward pass needs, recorded during the forward pass.
pub struct ForwardCache {
    enc_stash: Vec<[ConvStash; 2]>,
    pools: Vec<MaxPoolIndices>,
    /// (upsampled intermediate, pre-relu up output, concat input, stashes of
    /// the two decoder convs) per decoder block.
    dec_stash: Vec<DecStash>,
    final_input: Tensor4,
}

struct DecStash {
    upsampled: Tensor4,
    up_pre_relu: Tensor4,
    skip_channels: usize,
    conv1: ConvStash,
    conv2: ConvStash,
}

fn conv_relu(x: &Tensor4, p: &ConvParams) -> Result<(Tensor4, ConvStash)> {
    let pre = conv2d(x, &p.weights, &p.bias, 1, Padding::Same)?;
    let out = relu(&pre);
    Ok((
        out,
        ConvStash {
            input: x.clone(),
            pre_relu: pre,
        },
    ))
}

/// Gradients per named parameter block.
pub type Gradients = BTreeMap<String, (Tensor4, Vec<f64>)>;

impl UNet {
    /// Forward pass returning two-channel logits and the backward cache.
    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ForwardCache)> {
        let [_, c, h, w] = x.shape;
        if c != self.input.channels() {
            return Err(Error::Shape(format!(
                "input has {c} channels but arm {} expects {}",
                self.input.arm,
                self.input.channels()
            )));
        }
        self.check_spatial(h, w)?;

        let mut enc_stash = Vec::with_capacity(self.depth + 1);
        let mut enc_out: Vec<Tensor4> = Vec::with_capacity(self.depth + 1);
        let mut pools = Vec::with_capacity(self.depth);
        let mut cur = x.clone();
        for level in 0..=self.depth {
            let (y1, s1) = conv_relu(&cur, &self.enc[level][0])?;
            let (y2, s2) = conv_relu(&y1, &self.enc[level][1])?;
            enc_stash.push([s1, s2]);
            if level < self.depth {
                let (pooled, idx) = maxpool2(&y2)?;
                pools.push(idx);
                cur = pooled;
            } else {
                cur = y2.clone();
            }
            enc_out.push(y2);
        }

        let mut dec_stash = Vec::with_capacity(self.depth);
        for level in (0..self.depth).rev() {
            let block = &self.dec[self.dec_index(level)];
            let (up_pre, upsampled) = upconv2(&cur, &block.up.weights, &block.up.bias)?;
            let up = relu(&up_pre);
            let skip = &enc_out[level];
            let cat = concat_channels(skip, &up)?;
            let (y1, s1) = conv_relu(&cat, &block.conv1)?;
            let (y2, s2) = conv_relu(&y1, &block.conv2)?;
            dec_stash.push(DecStash {
                upsampled,
                up_pre_relu: up_pre,
                skip_channels: skip.shape[1],
                conv1: s1,
                conv2: s2,
            });
            cur = y2;
        }

        let logits = conv2d(
            &cur,
            &self.final_conv.weights,
            &self.final_conv.bias,
            1,
            Padding::Same,
        )?;
        Ok((
            logits,
            ForwardCache {
                enc_stash,
                pools,
                dec_stash,
                final_input: cur,
            },
        ))
    }

    /// Backward pass from the loss gradient at the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor4) -> Result<Gradients> {
        let mut grads = Gradients::new();
        let mut put = |name: String, dw: Tensor4, db: Vec<f64>| {
            grads.insert(name, (dw, db));
        };

        let (mut d_cur, dw, db) = conv2d_backward(
            &cache.final_input,
            &self.final_conv.weights,
            dlogits,
            Padding::Same,
        )?;
        put("final".into(), dw, db);

        // gradient flowing into each encoder level's output (skip + pool)
        let mut d_enc_out: Vec<Option<Tensor4>> = (0..=self.depth).map(|_| None).collect();
        let add_into = |slot: &mut Option<Tensor4>, g: Tensor4| {
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            }
        };

        // decoder blocks in reverse execution order: level 0 ran last
        for level in 0..self.depth {
            let stash = &cache.dec_stash[self.dec_index(level)];
            let block = &self.dec[self.dec_index(level)];
            let prefix = format!("dec{}", self.dec_index(level));

            let d_pre2 = relu_backward(&stash.conv2.pre_relu, &d_cur);
            let (d_c1, dw2, db2) =
                conv2d_backward(&stash.conv2.input, &block.conv2.weights, &d_pre2, Padding::Same)?;
            put(format!("{prefix}.conv2"), dw2, db2);

            let d_pre1 = relu_backward(&stash.conv1.pre_relu, &d_c1);
            let (d_cat, dw1, db1) =
                conv2d_backward(&stash.conv1.input, &block.conv1.weights, &d_pre1, Padding::Same)?;
            put(format!("{prefix}.conv1"), dw1, db1);

            let (d_skip, d_up) = concat_channels_backward(&d_cat, stash.skip_channels);
            add_into(&mut d_enc_out[level], d_skip);

            let d_up_pre = relu_backward(&stash.up_pre_relu, &d_up);
            let (d_below, dwu, dbu) =
                upconv2_backward(&stash.upsampled, &block.up.weights, &d_up_pre)?;
            put(format!("{prefix}.up"), dwu, dbu);
            d_cur = d_below;
        }
        add_into(&mut d_enc_out[self.depth], d_cur);

        // encoder levels bottom-up in backward order
        for level in (0..=self.depth).rev() {
            let d_out = d_enc_out[level].take().expect("encoder gradient present");
            let stash = &cache.enc_stash[level];
            let d_pre2 = relu_backward(&stash[1].pre_relu, &d_out);
            let (d_y1, dw2, db2) = conv2d_backward(
                &stash[1].input,
                &self.enc[level][1].weights,
                &d_pre2,
                Padding::Same,
            )?;
            put(format!("enc{level}.conv2"), dw2, db2);
            let d_pre1 = relu_backward(&stash[0].pre_relu, &d_y1);
            let (d_in, dw1, db1) = conv2d_backward(
                &stash[0].input,
                &self.enc[level][0].weights,
                &d_pre1,
                Padding::Same,
            )?;
            put(format!("enc{level}.conv1"), dw1, db1);
            if level > 0 {
                let routed = maxpool2_backward(&cache.pools[level - 1], &d_in);
                add_into(&mut d_enc_out[level - 1], routed);
            }
        }
        Ok(grads)
    }
}

/// Runs per-slice inference over the whole volume and writes the foreground
/// probability at each slice, producing a heat map on the case's diagnosis
/// ceT1w grid.
pub fn infer_volume(net: &UNet, case: &Case) -> Result<Volume> {
    let prepared = prepare_case(case, &net.input)?;
    let geom = case.reference_geometry().clone();
    let [nx, ny, nz] = geom.dims;
    net.check_spatial(ny, nx)?;
    let mut out = vec![0.0f32; geom.voxel_count()];
    for z in 0..nz {
        let x = prepared.assemble(z)?;
        let (logits, _) = net.forward(&x)?;
        let probs = softmax_channels(&logits);
        let fg = probs.plane(0, 1);
        for y in 0..ny {
            for xx in 0..nx {
                out[xx + nx * (y + ny * z)] = fg[y * nx + xx] as f32;
            }
        }
    }
    Volume::new(geom, out)
}
