//! V-Net-style encoder–decoder with one prediction head per decoder scale.
//!
//! Encoder stage `s` works at `1/2^s` resolution with `base_filters * 2^s`
//! channels; stage 0 opens with a 3³ convolution, deeper stages with a
//! strided 2³ convolution. Decoder stage `s` upsamples level `s + 1` with a
//! transposed 2³ convolution, adds the encoder skip, and refines with 3³
//! convolutions. Every convolution is followed by instance norm and ReLU.
//!
//! Head `k` reads decoder level `k` (level `depth` is the bottleneck),
//! applies a pointwise projection to class logits, upsamples by `2^k`
//! trilinearly and takes a per-voxel softmax.

use rand_distr::{Distribution, Normal};

use super::layers::{
    conv_backward, conv_forward, norm_relu_backward, norm_relu_forward, pointwise_backward,
    pointwise_forward, softmax, softmax_backward, upsample, upsample_backward, ConvKind, Feature,
    NormCache,
};
use super::params::{Param, ParamSet};
use super::real::Real;
use super::{BackboneConfig, MultiScalePrediction};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::volume::{Dims, Role, Volume};

#[derive(Debug, Clone)]
struct Unit {
    kind: ConvKind,
    cout: usize,
    w: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct Head {
    level: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    /// Normal with std `1/sqrt(fan_in)`.
    Lecun(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: BackboneConfig,
    enc: Vec<Vec<Unit>>,
    dec: Vec<Vec<Unit>>,
    heads: Vec<Head>,
    layout: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    /// `acts[0]` is the stage input, `acts[j + 1]` the output of unit `j`.
    acts: Vec<Feature<T>>,
    norms: Vec<NormCache<T>>,
}

#[derive(Debug, Clone)]
struct DecCache<T> {
    up_out: Feature<T>,
    up_norm: NormCache<T>,
    /// `convs.acts[0]` is the upsampled feature plus the skip.
    convs: StageCache<T>,
}

/// Activations saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    enc: Vec<StageCache<T>>,
    dec: Vec<Option<DecCache<T>>>,
    probs: Vec<Feature<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Probability map of head `k` at full resolution.
    pub fn probs(&self, k: usize) -> &Feature<T> {
        &self.probs[k]
    }

    pub fn head_count(&self) -> usize {
        self.probs.len()
    }

    pub fn into_probs(self) -> Vec<Feature<T>> {
        self.probs
    }
}

impl Network {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            layout.push((name, shape, init));
            layout.len() - 1
        };
        let unit = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                        prefix: String,
                        kind: ConvKind,
                        cin: usize,
                        cout: usize| {
            let (r, c) = kind.weight_shape(cin, cout);
            Unit {
                kind,
                cout,
                w: push(format!("{prefix}.conv.weight"), vec![r, c], Init::He(kind.fan_in(cin))),
                gamma: push(format!("{prefix}.norm.gamma"), vec![cout], Init::Ones),
                beta: push(format!("{prefix}.norm.beta"), vec![cout], Init::Zeros),
            }
        };
        let ch = |s: usize| cfg.base_filters << s;

        let mut enc = Vec::new();
        for s in 0..=cfg.depth {
            let mut units = Vec::new();
            let (first_kind, first_in) = if s == 0 {
                (ConvKind::Same3, cfg.in_channels)
            } else {
                (ConvKind::Down2, ch(s - 1))
            };
            units.push(unit(&mut push, format!("enc.{s}.0"), first_kind, first_in, ch(s)));
            let extra = if s == 0 { cfg.block_convs - 1 } else { cfg.block_convs };
            for j in 0..extra {
                units.push(unit(&mut push, format!("enc.{s}.{}", j + 1), ConvKind::Same3, ch(s), ch(s)));
            }
            enc.push(units);
        }
        let mut dec = Vec::new();
        for s in 0..cfg.depth {
            let mut units = vec![unit(&mut push, format!("dec.{s}.up"), ConvKind::Up2, ch(s + 1), ch(s))];
            for j in 0..cfg.block_convs {
                units.push(unit(&mut push, format!("dec.{s}.{j}"), ConvKind::Same3, ch(s), ch(s)));
            }
            dec.push(units);
        }
        let heads = (0..cfg.head_count)
            .map(|k| Head {
                level: k,
                w: push(
                    format!("head.{k}.weight"),
                    vec![cfg.class_count, ch(k)],
                    Init::Lecun(ch(k)),
                ),
                b: push(format!("head.{k}.bias"), vec![cfg.class_count], Init::Zeros),
            })
            .collect();
        Ok(Self {
            cfg,
            enc,
            dec,
            heads,
            layout,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.iter().map(|(n, _, _)| n.as_str())
    }

    /// Deterministic He/LeCun-normal initialization.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = seeded(seed);
        let params = self
            .layout
            .iter()
            .map(|(name, shape, init)| {
                let len: usize = shape.iter().product();
                let data = match *init {
                    Init::He(fan) | Init::Lecun(fan) => {
                        let gain = if matches!(init, Init::He(_)) { 2.0 } else { 1.0 };
                        let normal = Normal::new(0.0, (gain / fan as f64).sqrt())
                            .expect("positive std");
                        (0..len).map(|_| T::of(normal.sample(&mut rng))).collect()
                    }
                    Init::Ones => vec![T::one(); len],
                    Init::Zeros => vec![T::zero(); len],
                };
                Param {
                    name: name.clone(),
                    shape: shape.clone(),
                    data,
                }
            })
            .collect();
        ParamSet { params }
    }

    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.params.len() != self.layout.len() {
            return Err(Error::InvalidArgument(format!(
                "network expects {} parameter tensors, got {}",
                self.layout.len(),
                params.params.len()
            )));
        }
        for ((name, shape, _), p) in self.layout.iter().zip(&params.params) {
            if &p.name != name || &p.shape != shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(())
    }

    pub fn check_input(&self, channels: usize, dims: Dims) -> Result<()> {
        if channels != self.cfg.in_channels {
            return Err(Error::shape(
                "network input channels",
                &[self.cfg.in_channels],
                &[channels],
            ));
        }
        let f = 1usize << self.cfg.depth;
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            let expected = dims.map(|d| (d.max(1)).div_ceil(f) * f);
            return Err(Error::shape("network input dims (multiple of 2^depth)", &expected, &dims));
        }
        Ok(())
    }

    fn run_units<T: Real>(
        &self,
        units: &[Unit],
        params: &ParamSet<T>,
        input: Feature<T>,
        scratch: &mut Vec<T>,
    ) -> StageCache<T> {
        let mut acts = vec![input];
        let mut norms = Vec::with_capacity(units.len());
        for u in units {
            let x = acts.last().expect("stage input");
            let mut y = conv_forward(u.kind, &params.params[u.w].data, u.cout, x, scratch);
            norms.push(norm_relu_forward(
                &mut y,
                &params.params[u.gamma].data,
                &params.params[u.beta].data,
            ));
            acts.push(y);
        }
        StageCache { acts, norms }
    }

    fn level_feature<'a, T>(&self, cache: &'a ForwardCache<T>, level: usize) -> &'a Feature<T> {
        if level == self.cfg.depth {
            cache.enc[level].acts.last().expect("bottleneck")
        } else {
            cache.dec[level]
                .as_ref()
                .expect("decoder level computed")
                .convs
                .acts
                .last()
                .expect("decoder output")
        }
    }

    /// Forward pass producing the first `heads` probability maps.
    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        input: &Feature<T>,
        heads: usize,
    ) -> Result<ForwardCache<T>> {
        self.check_params(params)?;
        self.check_input(input.channels, input.dims)?;
        if heads == 0 || heads > self.heads.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {heads} heads, network has {}",
                self.heads.len()
            )));
        }
        let depth = self.cfg.depth;
        let mut scratch = Vec::new();
        let mut enc: Vec<StageCache<T>> = Vec::with_capacity(depth + 1);
        for s in 0..=depth {
            let x = if s == 0 {
                input.clone()
            } else {
                enc[s - 1].acts.last().expect("stage output").clone()
            };
            enc.push(self.run_units(&self.enc[s], params, x, &mut scratch));
        }
        let mut cache = ForwardCache {
            enc,
            dec: vec![None; depth],
            probs: Vec::with_capacity(heads),
        };
        for s in (0..depth).rev() {
            let units = &self.dec[s];
            let up = &units[0];
            let below = self.level_feature(&cache, s + 1);
            let mut up_out = conv_forward(up.kind, &params.params[up.w].data, up.cout, below, &mut scratch);
            let up_norm = norm_relu_forward(
                &mut up_out,
                &params.params[up.gamma].data,
                &params.params[up.beta].data,
            );
            let mut sum = up_out.clone();
            sum.add_assign(cache.enc[s].acts.last().expect("skip"));
            let convs = self.run_units(&units[1..], params, sum, &mut scratch);
            cache.dec[s] = Some(DecCache {
                up_out,
                up_norm,
                convs,
            });
        }
        for head in &self.heads[..heads] {
            let feat = self.level_feature(&cache, head.level);
            let logits = pointwise_forward(
                &params.params[head.w].data,
                &params.params[head.b].data,
                self.cfg.class_count,
                feat,
            );
            let mut probs = upsample(&logits, 1 << head.level);
            softmax(&mut probs);
            cache.probs.push(probs);
        }
        Ok(cache)
    }

    /// Accumulates parameter gradients given `d loss / d probs` per head.
    /// Heads with `None` contribute nothing.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &ForwardCache<T>,
        head_grads: Vec<Option<Feature<T>>>,
        grads: &mut ParamSet<T>,
    ) -> Result<()> {
        if head_grads.len() > cache.probs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} head gradients for {} computed heads",
                head_grads.len(),
                cache.probs.len()
            )));
        }
        let depth = self.cfg.depth;
        let mut scratch = Vec::new();
        let mut gfeat: Vec<Option<Feature<T>>> = vec![None; depth + 1];
        let accumulate = |slot: &mut Option<Feature<T>>, g: Feature<T>| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };

        for (k, g) in head_grads.into_iter().enumerate() {
            let Some(mut g) = g else { continue };
            let probs = &cache.probs[k];
            if g.dims != probs.dims || g.channels != probs.channels {
                return Err(Error::shape(
                    "head gradient",
                    &[probs.channels, probs.dims[0], probs.dims[1], probs.dims[2]],
                    &[g.channels, g.dims[0], g.dims[1], g.dims[2]],
                ));
            }
            let head = &self.heads[k];
            softmax_backward(probs, &mut g);
            let feat = self.level_feature(cache, head.level);
            let dlogits = upsample_backward(&g, feat.dims, 1 << head.level);
            let (wi, bi) = (head.w, head.b);
            let (dw, db) = two_mut(&mut grads.params, wi, bi);
            let dfeat = pointwise_backward(&params.params[wi].data, feat, &dlogits, &mut dw.data, &mut db.data);
            accumulate(&mut gfeat[head.level], dfeat);
        }

        let mut genc: Vec<Option<Feature<T>>> = vec![None; depth + 1];
        for s in 0..depth {
            let Some(g) = gfeat[s].take() else { continue };
            let dc = cache.dec[s].as_ref().expect("decoder stage cached");
            let units = &self.dec[s];
            let gsum = self.stage_backward(&units[1..], params, &dc.convs, g, grads, &mut scratch, true)
                .expect("input gradient requested");
            let up = &units[0];
            let mut gup = gsum.clone();
            accumulate(&mut genc[s], gsum);
            {
                let (dgamma, dbeta) = two_mut(&mut grads.params, up.gamma, up.beta);
                norm_relu_backward(
                    &dc.up_out,
                    &dc.up_norm,
                    &params.params[up.gamma].data,
                    &mut gup,
                    &mut dgamma.data,
                    &mut dbeta.data,
                );
            }
            let below = self.level_feature(cache, s + 1);
            let dbelow = conv_backward(
                up.kind,
                &params.params[up.w].data,
                below,
                &gup,
                &mut grads.params[up.w].data,
                &mut scratch,
                true,
            )
            .expect("input gradient requested");
            accumulate(&mut gfeat[s + 1], dbelow);
        }
        if let Some(g) = gfeat[depth].take() {
            accumulate(&mut genc[depth], g);
        }
        for s in (0..=depth).rev() {
            let Some(g) = genc[s].take() else { continue };
            let dx = self.stage_backward(&self.enc[s], params, &cache.enc[s], g, grads, &mut scratch, s > 0);
            if let Some(dx) = dx {
                accumulate(&mut genc[s - 1], dx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn stage_backward<T: Real>(
        &self,
        units: &[Unit],
        params: &ParamSet<T>,
        sc: &StageCache<T>,
        mut g: Feature<T>,
        grads: &mut ParamSet<T>,
        scratch: &mut Vec<T>,
        need_input_grad: bool,
    ) -> Option<Feature<T>> {
        for (j, u) in units.iter().enumerate().rev() {
            {
                let (dgamma, dbeta) = two_mut(&mut grads.params, u.gamma, u.beta);
                norm_relu_backward(
                    &sc.acts[j + 1],
                    &sc.norms[j],
                    &params.params[u.gamma].data,
                    &mut g,
                    &mut dgamma.data,
                    &mut dbeta.data,
                );
            }
            let need = j > 0 || need_input_grad;
            g = conv_backward(
                u.kind,
                &params.params[u.w].data,
                &sc.acts[j],
                &g,
                &mut grads.params[u.w].data,
                scratch,
                need,
            )?;
        }
        Some(g)
    }

    fn volume_input(&self, patch: &Volume) -> Result<Feature<f32>> {
        if patch.role() != Role::Image {
            return Err(Error::InvalidArgument(format!(
                "network input must be an image volume, got {:?}",
                patch.role()
            )));
        }
        Ok(Feature {
            channels: patch.channels(),
            dims: patch.dims(),
            data: patch.values().to_vec(),
        })
    }

    fn to_volume(&self, f: Feature<f32>, spacing: [f64; 3]) -> Result<Volume> {
        Volume::probability(f.dims, spacing, f.channels, f.data)
    }

    /// All head maps at full patch resolution.
    pub fn forward_multiscale(&self, params: &ParamSet<f32>, patch: &Volume) -> Result<MultiScalePrediction> {
        let x = self.volume_input(patch)?;
        let cache = self.forward(params, &x, self.heads.len())?;
        let maps = cache
            .into_probs()
            .into_iter()
            .map(|f| self.to_volume(f, patch.spacing()))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiScalePrediction { maps })
    }

    /// Highest-resolution head only; used by the teacher and at inference.
    pub fn forward_top(&self, params: &ParamSet<f32>, patch: &Volume) -> Result<Volume> {
        let x = self.volume_input(patch)?;
        let cache = self.forward(params, &x, 1)?;
        let p = cache.into_probs().swap_remove(0);
        self.to_volume(p, patch.spacing())
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a != b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
