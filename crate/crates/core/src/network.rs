//! The registration network: a four-stage windowed-attention encoder, optional
//! full/half resolution convolution blocks, a superresolution decoder and a
//! displacement head.
//!
//! Encoder features are token matrices `[N, C]`; the decoder works on
//! channel-first grids `[C, Z, Y, X]`.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    ca_hidden, conv, fab_forward, init_conv, init_fab, init_layer_norm, init_oab, init_patch_embed, init_patch_merge,
    layer_norm, oab_forward, patch_embed, patch_merge, tokens_to_volume, FabSpec,
};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::volume::{Dims, DisplacementField, Volume};
use crate::windowing::WindowSpec;

pub const STAGES: usize = 4;
/// Width of the full-resolution decoder level and the full-resolution conv block.
pub const FULL_RES_WIDTH: usize = 16;
const LRELU_SLOPE: Real = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    S,
    Base,
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    /// channel convolution + pixel shuffle
    Sr,
    /// trilinear interpolation + 1×1×1 convolution
    Trilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// input volume extents `(X, Y, Z)`; window geometry of the deep stages depends on it
    pub input_dims: Dims,
    pub embed_dim: usize,
    pub depths: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub oab_heads: usize,
    pub window: usize,
    pub patch: usize,
    pub alpha: f64,
    pub beta: usize,
    pub epsilon: f64,
    pub use_conv_blocks: bool,
    pub upsample_mode: UpsampleMode,
    pub fab_on: bool,
    pub oab_on: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::variant(Variant::Base)
    }
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let (embed_dim, depths, heads) = match v {
            Variant::S => (48, [2, 2, 2, 2], [4, 4, 4, 4]),
            Variant::Base => (96, [2, 2, 4, 2], [4, 4, 8, 8]),
            Variant::L => (128, [2, 2, 18, 2], [4, 4, 8, 16]),
        };
        ModelConfig {
            input_dims: [64; 3],
            embed_dim,
            depths,
            heads,
            oab_heads: 4,
            window: 4,
            patch: 4,
            alpha: 0.01,
            beta: 3,
            epsilon: 0.5,
            use_conv_blocks: true,
            upsample_mode: UpsampleMode::Sr,
            fab_on: true,
            oab_on: true,
        }
    }

    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Token grid of stage `i` (0-based).
    pub fn stage_grid(&self, i: usize) -> Dims {
        self.input_dims.map(|e| e / (self.patch << i))
    }

    fn window_spec(&self) -> WindowSpec {
        WindowSpec::cubic(self.window, self.epsilon)
    }

    /// Decoder output width at each level, coarse to fine: /16, /8, /4, /2, /1.
    pub fn decoder_widths(&self) -> [usize; 5] {
        let c = self.embed_dim;
        [4 * c, 2 * c, c, (c / 2).max(1), FULL_RES_WIDTH]
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embed_dim must be even, got {}", self.embed_dim)));
        }
        if self.patch == 0 || self.window == 0 {
            return Err(Error::Config("patch and window sizes must be positive".into()));
        }
        if self.beta == 0 {
            return Err(Error::Config("beta must be >= 1".into()));
        }
        self.window_spec().validate()?;
        let factor = self.patch << (STAGES - 1);
        for (a, &e) in self.input_dims.iter().enumerate() {
            if e == 0 || e % factor != 0 {
                return Err(Error::Config(format!(
                    "input extent {e} on axis {} must be a positive multiple of {factor}",
                    ['x', 'y', 'z'][a]
                )));
            }
        }
        if self.patch != 4 {
            return Err(Error::Config("the decoder assumes a patch size of 4".into()));
        }
        for i in 0..STAGES {
            let d = self.stage_dim(i);
            if self.heads[i] == 0 || d % self.heads[i] != 0 {
                return Err(Error::Config(format!("stage {} heads {} do not divide {d}", i + 1, self.heads[i])));
            }
            if self.oab_on && (self.oab_heads == 0 || d % self.oab_heads != 0) {
                return Err(Error::Config(format!("OAB heads {} do not divide {d}", self.oab_heads)));
            }
        }
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [self.input_dims[2], self.input_dims[1], self.input_dims[0]];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Dims(format!(
                "input grid {:?} does not match the configured extents (X, Y, Z) = {:?}",
                &shape[1.min(shape.len())..],
                self.input_dims
            )));
        }
        Ok(())
    }
}

/// Channel-first encoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    /// stage outputs at /4, /8, /16, /32 with widths C, 2C, 4C, 8C
    pub stages: [Var; STAGES],
    /// C/2 channels at /2
    pub e_half: Option<Var>,
    /// 16 channels at /1
    pub e_full: Option<Var>,
}

/// Named intermediate shapes recorded during a forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn fab_spec(cfg: &ModelConfig, stage: usize, block: usize) -> FabSpec {
    let (ws, shift_ok) = cfg.window_spec().fit(cfg.stage_grid(stage));
    FabSpec {
        dim: cfg.stage_dim(stage),
        heads: cfg.heads[stage],
        p: ws.p,
        shifted: shift_ok && block % 2 == 1,
        alpha: cfg.alpha as Real,
        use_ca: cfg.fab_on,
    }
}

fn oab_spec(cfg: &ModelConfig, stage: usize) -> WindowSpec {
    cfg.window_spec().fit(cfg.stage_grid(stage)).0
}

/// Decoder level `k`: (input width, output width, skip width).
fn decoder_level(cfg: &ModelConfig, k: usize) -> (usize, usize, usize) {
    let widths = cfg.decoder_widths();
    let c_in = if k == 0 { cfg.stage_dim(3) } else { widths[k - 1] };
    let skip = match k {
        0..=2 => cfg.stage_dim(2 - k),
        3 if cfg.use_conv_blocks => widths[3],
        4 if cfg.use_conv_blocks => FULL_RES_WIDTH,
        _ => 0,
    };
    (c_in, widths[k], skip)
}

impl Model {
    /// Randomly initialized parameters, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let cfg = &config;
        init_patch_embed(&mut p, "embed", 2, cfg.embed_dim, cfg.patch, &mut rng)?;
        for i in 0..STAGES {
            let dim = cfg.stage_dim(i);
            if i > 0 {
                init_patch_merge(&mut p, &format!("stage{}.merge", i + 1), cfg.stage_dim(i - 1), &mut rng)?;
            }
            for j in 0..cfg.depths[i] {
                let spec = fab_spec(cfg, i, j);
                let hidden = cfg.fab_on.then(|| ca_hidden(dim, cfg.beta));
                init_fab(&mut p, &format!("stage{}.fab{j}", i + 1), dim, spec.heads, spec.p, hidden, &mut rng)?;
            }
            if cfg.oab_on {
                init_oab(&mut p, &format!("stage{}.oab", i + 1), dim, cfg.oab_heads, &oab_spec(cfg, i), &mut rng)?;
            }
            init_layer_norm(&mut p, &format!("stage{}.norm", i + 1), dim)?;
        }
        if cfg.use_conv_blocks {
            init_conv(&mut p, "conv_half", 2, cfg.decoder_widths()[3], 3, &mut rng)?;
            init_conv(&mut p, "conv_full", 2, FULL_RES_WIDTH, 3, &mut rng)?;
        }
        for k in 0..5 {
            let (c_in, c_out, skip) = decoder_level(cfg, k);
            let name = format!("up{}", k + 1);
            match cfg.upsample_mode {
                UpsampleMode::Sr => init_conv(&mut p, &format!("{name}.expand"), c_in, 8 * c_out, 1, &mut rng)?,
                UpsampleMode::Trilinear => init_conv(&mut p, &format!("{name}.reduce"), c_in, c_out, 1, &mut rng)?,
            }
            init_conv(&mut p, &format!("{name}.fuse1"), c_out + skip, c_out, 3, &mut rng)?;
            init_conv(&mut p, &format!("{name}.fuse2"), c_out, c_out, 3, &mut rng)?;
        }
        p.insert("head.w", Tensor::zeros(&[3, FULL_RES_WIDTH, 3, 3, 3]))?;
        p.insert("head.b", Tensor::zeros(&[3]))?;
        Ok(Model { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Loads parameters saved for the same configuration.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        model.params.load_from(&params)?;
        Ok(model)
    }
}

struct Ctx<'a> {
    cfg: &'a ModelConfig,
    scope: &'a Scope<'a>,
    trace: Option<&'a RefCell<ShapeTrace>>,
}

impl Ctx<'_> {
    fn g(&self) -> &Graph {
        self.scope.graph()
    }

    fn record(&self, name: impl Into<String>, v: Var) {
        if let Some(t) = self.trace {
            t.borrow_mut().push((name.into(), self.g().shape(v)));
        }
    }

    fn conv_block(&self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let g = self.g();
        let y = conv(self.scope, name, x, stride, 1)?;
        let s = g.shape(y);
        let flat = g.reshape(y, &[s[0], s[1] * s[2] * s[3]])?;
        let normed = g.reshape(g.layer_norm(flat, None, None)?, &s)?;
        Ok(g.leaky_relu(normed, LRELU_SLOPE))
    }

    fn encode(&self, pair: Var) -> Result<FeaturePyramid> {
        let cfg = self.cfg;
        let s = self.scope;
        let g = self.g();
        cfg.check_input(&g.shape(pair))?;
        let (mut x, mut grid) = patch_embed(s, "embed", pair, cfg.patch)?;
        self.record("embed", x);
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let stage = format!("stage{}", i + 1);
            if i > 0 {
                (x, grid) = patch_merge(s, &format!("{stage}.merge"), x, grid)?;
                self.record(format!("{stage}.merge"), x);
            }
            for j in 0..cfg.depths[i] {
                x = fab_forward(s, &format!("{stage}.fab{j}"), x, grid, &fab_spec(cfg, i, j))?;
                self.record(format!("{stage}.fab{j}"), x);
            }
            if cfg.oab_on {
                x = oab_forward(s, &format!("{stage}.oab"), x, grid, &oab_spec(cfg, i), cfg.oab_heads)?;
                self.record(format!("{stage}.oab"), x);
            }
            let out = layer_norm(s, &format!("{stage}.norm"), x)?;
            let f = tokens_to_volume(g, out, grid)?;
            self.record(format!("F{}", i + 1), f);
            stages.push(f);
        }
        let (e_half, e_full) = if cfg.use_conv_blocks {
            let h = self.conv_block("conv_half", pair, 2)?;
            let f = self.conv_block("conv_full", pair, 1)?;
            self.record("E_half", h);
            self.record("E_full", f);
            (Some(h), Some(f))
        } else {
            (None, None)
        };
        Ok(FeaturePyramid {
            stages: [stages[0], stages[1], stages[2], stages[3]],
            e_half,
            e_full,
        })
    }

    fn upsample(&self, k: usize, x: Var, skip: Option<Var>) -> Result<Var> {
        let g = self.g();
        let s = self.scope;
        let name = format!("up{}", k + 1);
        let up = match self.cfg.upsample_mode {
            UpsampleMode::Sr => {
                let wide = conv(s, &format!("{name}.expand"), x, 1, 0)?;
                self.record(format!("{name}.expand"), wide);
                g.pixel_shuffle(wide, 2)?
            }
            UpsampleMode::Trilinear => {
                // a 1×1×1 convolution commutes with interpolation, so it runs at the coarse level
                let narrow = conv(s, &format!("{name}.reduce"), x, 1, 0)?;
                self.record(format!("{name}.reduce"), narrow);
                g.upsample_trilinear(narrow)?
            }
        };
        self.record(format!("{name}.upsampled"), up);
        let fused_in = match skip {
            Some(skip) => {
                let (us, ss) = (g.shape(up), g.shape(skip));
                if us[1..] != ss[1..] {
                    return Err(Error::Dims(format!("upsampled {us:?} does not match skip {ss:?}")));
                }
                let cat = g.concat(&[up, skip], 0)?;
                self.record(format!("{name}.concat"), cat);
                cat
            }
            None => up,
        };
        let h = g.leaky_relu(conv(s, &format!("{name}.fuse1"), fused_in, 1, 1)?, LRELU_SLOPE);
        let out = g.leaky_relu(conv(s, &format!("{name}.fuse2"), h, 1, 1)?, LRELU_SLOPE);
        self.record(name, out);
        Ok(out)
    }

    fn decode(&self, p: &FeaturePyramid) -> Result<Var> {
        let skips = [Some(p.stages[2]), Some(p.stages[1]), Some(p.stages[0]), p.e_half, p.e_full];
        let mut x = p.stages[3];
        for (k, skip) in skips.into_iter().enumerate() {
            x = self.upsample(k, x, skip)?;
        }
        let field = conv(self.scope, "head", x, 1, 1)?;
        self.record("field", field);
        Ok(field)
    }
}

/// Concatenates moving and fixed `[1, Z, Y, X]` grids into the 2-channel input.
pub fn stack_pair(g: &Graph, moving: Var, fixed: Var) -> Result<Var> {
    let (ms, fs) = (g.shape(moving), g.shape(fixed));
    if ms != fs {
        return Err(Error::Dims(format!("moving {ms:?} and fixed {fs:?} differ")));
    }
    Ok(g.concat(&[moving, fixed], 0)?)
}

pub fn encode(cfg: &ModelConfig, scope: &Scope, pair: Var) -> Result<FeaturePyramid> {
    Ctx { cfg, scope, trace: None }.encode(pair)
}

/// Displacement field `[3, Z, Y, X]` from the pyramid.
pub fn decode(cfg: &ModelConfig, scope: &Scope, pyramid: &FeaturePyramid) -> Result<Var> {
    Ctx { cfg, scope, trace: None }.decode(pyramid)
}

/// `moving`, `fixed`: `[1, Z, Y, X]` → displacement `[3, Z, Y, X]` in voxels.
pub fn predict_field(cfg: &ModelConfig, scope: &Scope, moving: Var, fixed: Var) -> Result<Var> {
    let ctx = Ctx { cfg, scope, trace: None };
    let pair = stack_pair(scope.graph(), moving, fixed)?;
    let p = ctx.encode(pair)?;
    ctx.decode(&p)
}

/// Like [`predict_field`], also returning every intermediate shape.
pub fn predict_field_traced(cfg: &ModelConfig, scope: &Scope, moving: Var, fixed: Var) -> Result<(Var, ShapeTrace)> {
    let trace = RefCell::new(Vec::new());
    let ctx = Ctx {
        cfg,
        scope,
        trace: Some(&trace),
    };
    let pair = stack_pair(scope.graph(), moving, fixed)?;
    ctx.record("input", pair);
    let p = ctx.encode(pair)?;
    let field = ctx.decode(&p)?;
    Ok((field, trace.into_inner()))
}

/// Inference: predicted field and the moving volume warped by it.
pub fn register_pair(model: &Model, moving: &Volume, fixed: &Volume) -> Result<(DisplacementField, Volume)> {
    if moving.dims() != fixed.dims() {
        return Err(Error::Dims(format!(
            "moving {:?} and fixed {:?} differ",
            moving.dims(),
            fixed.dims()
        )));
    }
    let g = Graph::new();
    let scope = Scope::new(&g, &model.params, false);
    let m = g.constant(moving.to_tensor());
    let f = g.constant(fixed.to_tensor());
    let field = predict_field(&model.config, &scope, m, f)?;
    let warped = g.warp(m, field)?;
    Ok((
        DisplacementField::from_tensor(&g.value(field), moving.spacing())?,
        Volume::from_tensor(&g.value(warped), moving.spacing())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(dims: usize) -> ModelConfig {
        ModelConfig {
            input_dims: [dims; 3],
            embed_dim: 8,
            depths: [1, 1, 1, 1],
            heads: [2, 2, 2, 2],
            oab_heads: 2,
            ..ModelConfig::variant(Variant::S)
        }
    }

    fn volume(dims: usize, phase: f32) -> Volume {
        Volume::from_fn([dims; 3], [1.0; 3], |x, y, z| {
            ((x as f32 * 0.3 + phase).sin() + (y as f32 * 0.2).cos() * (z as f32 * 0.25 + phase).sin()) * 0.5 + 0.5
        })
        .unwrap()
    }

    #[test]
    fn zero_head_gives_identity_registration() {
        let model = Model::new(tiny(32), 1).unwrap();
        let (m, f) = (volume(32, 0.0), volume(32, 1.0));
        let (u, w) = register_pair(&model, &m, &f).unwrap();
        assert_eq!(u.max_abs(), 0.0);
        assert_eq!(w, m);
        let (u2, w2) = register_pair(&model, &m, &f).unwrap();
        assert_eq!((u, w), (u2, w2));
    }

    #[test]
    fn output_is_full_resolution_for_every_toggle() {
        for (conv_blocks, mode, fab, oab) in [
            (true, UpsampleMode::Sr, true, true),
            (false, UpsampleMode::Sr, true, true),
            (true, UpsampleMode::Trilinear, false, false),
            (false, UpsampleMode::Trilinear, true, false),
        ] {
            let cfg = ModelConfig {
                use_conv_blocks: conv_blocks,
                upsample_mode: mode,
                fab_on: fab,
                oab_on: oab,
                ..tiny(32)
            };
            let model = Model::new(cfg.clone(), 2).unwrap();
            let g = Graph::new();
            let s = Scope::new(&g, &model.params, false);
            let m = g.constant(volume(32, 0.0).to_tensor());
            let f = g.constant(volume(32, 0.5).to_tensor());
            let (u, trace) = predict_field_traced(&cfg, &s, m, f).unwrap();
            assert_eq!(g.shape(u), vec![3, 32, 32, 32]);
            let names: Vec<_> = trace.iter().map(|(n, _)| n.as_str()).collect();
            assert_eq!(names.contains(&"stage1.oab"), oab);
            assert_eq!(names.contains(&"E_full"), conv_blocks);
        }
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let mut cfg = tiny(32);
        cfg.input_dims = [48, 32, 32];
        assert!(Model::new(cfg, 0).is_err());
        let mut cfg = tiny(32);
        cfg.heads[1] = 3;
        assert!(Model::new(cfg, 0).is_err());
        let model = Model::new(tiny(32), 0).unwrap();
        let (m, f) = (volume(64, 0.0), volume(64, 0.0));
        assert!(register_pair(&model, &m, &f).is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(Model::new(tiny(32), 3).unwrap(), Model::new(tiny(32), 3).unwrap());
        assert_ne!(Model::new(tiny(32), 3).unwrap(), Model::new(tiny(32), 4).unwrap());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig::variant(Variant::L);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), cfg);
        let partial: ModelConfig = serde_json::from_str(r#"{"upsample_mode":"trilinear"}"#).unwrap();
        assert_eq!(partial.embed_dim, 96);
        assert_eq!(partial.upsample_mode, UpsampleMode::Trilinear);
    }
}
