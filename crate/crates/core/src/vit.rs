//! Vision transformer classifier: patch embedding, pre-LN encoder layers,
//! final LN, class-token readout and a linear head.
//!
//! Layer and non-layer parameters are supplied from outside, so the same
//! forward code runs for materialized layers and for layers generated from a
//! learngene. The parameter containers are generic over their leaf type:
//! `LayerParams<Tensor<T>>` holds values, `LayerParams<Var>` holds handles
//! into a [`ComputationRecord`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, shape_err, Error, Result};
use crate::init::{trunc_normal, INIT_STD};
use crate::tensor::{ComputationRecord, Real, Tensor, Var, LN_EPS};

/// Dimensions of a ViT classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Embedding width `D`.
    pub dim: usize,
    /// Number of encoder layers `L`.
    pub depth: usize,
    pub heads: usize,
    /// Per-head width `d`; `dim == heads * head_dim`.
    pub head_dim: usize,
    /// MLP hidden width `D_h`.
    pub mlp_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Config with `head_dim = dim / heads`.
    pub fn new(dim: usize, depth: usize, heads: usize, mlp_dim: usize) -> Self {
        Self {
            dim,
            depth,
            heads,
            head_dim: dim.checked_div(heads).unwrap_or(0),
            mlp_dim,
            patch_size: 4,
            image_size: 16,
            in_channels: 3,
            num_classes: 10,
        }
    }

    pub fn with_image(mut self, image_size: usize, patch_size: usize, in_channels: usize) -> Self {
        self.image_size = image_size;
        self.patch_size = patch_size;
        self.in_channels = in_channels;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    /// Checks every structural invariant. Depth 0 is accepted (empty stack).
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.dim,
            self.heads,
            self.head_dim,
            self.mlp_dim,
            self.patch_size,
            self.image_size,
            self.in_channels,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if self.dim != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "dim {} != heads {} × head_dim {}",
                self.dim, self.heads, self.head_dim
            )));
        }
        if self.mlp_dim <= self.dim {
            return Err(Error::Config(format!(
                "mlp_dim {} must exceed dim {}",
                self.mlp_dim, self.dim
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Tokens per sequence `N`, class token included.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// True when layer parameters of `self` and `other` are interchangeable.
    pub fn same_layer_shape(&self, other: &ModelConfig) -> bool {
        (self.dim, self.heads, self.head_dim, self.mlp_dim)
            == (other.dim, other.heads, other.head_dim, other.mlp_dim)
    }
}

/// The three expandable parameter groups of an encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Msa,
    Mlp,
    Ln,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Msa, ParamGroup::Mlp, ParamGroup::Ln];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Msa => "msa",
            ParamGroup::Mlp => "mlp",
            ParamGroup::Ln => "ln",
        }
    }

    fn bit(self) -> u8 {
        match self {
            ParamGroup::Msa => 1,
            ParamGroup::Mlp => 2,
            ParamGroup::Ln => 4,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "msa" => Ok(ParamGroup::Msa),
            "mlp" => Ok(ParamGroup::Mlp),
            "ln" => Ok(ParamGroup::Ln),
            other => Err(Error::Config(format!("unknown module group '{other}'"))),
        }
    }
}

/// A subset of {MSA, MLP, LN}.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const ALL: GroupSet = GroupSet(7);
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn only(g: ParamGroup) -> Self {
        GroupSet(g.bit())
    }

    pub fn from_groups(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        GroupSet(groups.into_iter().fold(0, |m, g| m | g.bit()))
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_all(self) -> bool {
        self == Self::ALL
    }

    pub fn groups(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl fmt::Debug for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupSet({self})")
    }
}

impl fmt::Display for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.groups().map(ParamGroup::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for GroupSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        let groups = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<ParamGroup>>>()?;
        Ok(Self::from_groups(groups))
    }
}

/// Query/key/value projections of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<P> {
    pub w_q: P,
    pub b_q: P,
    pub w_k: P,
    pub b_k: P,
    pub w_v: P,
    pub b_v: P,
}

/// All parameters of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<P> {
    /// Per-head projections, each weight `[D, d]`, each bias `[d]`.
    pub heads: Vec<HeadParams<P>>,
    /// `[h·d, D]`
    pub w_o: P,
    pub b_o: P,
    /// `[D, D_h]`
    pub w1: P,
    pub b1: P,
    /// `[D_h, D]`
    pub w2: P,
    pub b2: P,
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub ln2_gamma: P,
    pub ln2_beta: P,
}

/// Describes one slot of a parameter container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub group: ParamGroup,
    /// Name within its group, e.g. `head0.w_q` or `gamma1`.
    pub name: String,
    pub shape: Vec<usize>,
}

impl Slot {
    fn new(group: ParamGroup, name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            group,
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    /// `{group}.{name}`
    pub fn qualified(&self) -> String {
        format!("{}.{}", self.group, self.name)
    }
}

impl LayerParams<Slot> {
    /// Names, groups and shapes of every layer parameter for `cfg`.
    pub fn slots(cfg: &ModelConfig) -> Self {
        let (d_model, d, dh) = (cfg.dim, cfg.head_dim, cfg.mlp_dim);
        let msa = ParamGroup::Msa;
        let heads = (0..cfg.heads)
            .map(|k| HeadParams {
                w_q: Slot::new(msa, format!("head{k}.w_q"), &[d_model, d]),
                b_q: Slot::new(msa, format!("head{k}.b_q"), &[d]),
                w_k: Slot::new(msa, format!("head{k}.w_k"), &[d_model, d]),
                b_k: Slot::new(msa, format!("head{k}.b_k"), &[d]),
                w_v: Slot::new(msa, format!("head{k}.w_v"), &[d_model, d]),
                b_v: Slot::new(msa, format!("head{k}.b_v"), &[d]),
            })
            .collect();
        let (mlp, ln) = (ParamGroup::Mlp, ParamGroup::Ln);
        LayerParams {
            heads,
            w_o: Slot::new(msa, "w_o", &[cfg.heads * d, d_model]),
            b_o: Slot::new(msa, "b_o", &[d_model]),
            w1: Slot::new(mlp, "w1", &[d_model, dh]),
            b1: Slot::new(mlp, "b1", &[dh]),
            w2: Slot::new(mlp, "w2", &[dh, d_model]),
            b2: Slot::new(mlp, "b2", &[d_model]),
            ln1_gamma: Slot::new(ln, "gamma1", &[d_model]),
            ln1_beta: Slot::new(ln, "beta1", &[d_model]),
            ln2_gamma: Slot::new(ln, "gamma2", &[d_model]),
            ln2_beta: Slot::new(ln, "beta2", &[d_model]),
        }
    }
}

impl<P> LayerParams<P> {
    /// Fallible structural map preserving slot order.
    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&P) -> Result<Q, E>) -> Result<LayerParams<Q>, E> {
        let heads = self
            .heads
            .iter()
            .map(|h| {
                Ok(HeadParams {
                    w_q: f(&h.w_q)?,
                    b_q: f(&h.b_q)?,
                    w_k: f(&h.w_k)?,
                    b_k: f(&h.b_k)?,
                    w_v: f(&h.w_v)?,
                    b_v: f(&h.b_v)?,
                })
            })
            .collect::<Result<Vec<_>, E>>()?;
        Ok(LayerParams {
            heads,
            w_o: f(&self.w_o)?,
            b_o: f(&self.b_o)?,
            w1: f(&self.w1)?,
            b1: f(&self.b1)?,
            w2: f(&self.w2)?,
            b2: f(&self.b2)?,
            ln1_gamma: f(&self.ln1_gamma)?,
            ln1_beta: f(&self.ln1_beta)?,
            ln2_gamma: f(&self.ln2_gamma)?,
            ln2_beta: f(&self.ln2_beta)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> LayerParams<Q> {
        self.try_map::<Q, std::convert::Infallible>(|p| Ok(f(p)))
            .unwrap_or_else(|e| match e {})
    }

    /// Leaves in slot order.
    pub fn refs(&self) -> Vec<&P> {
        let mut out = Vec::with_capacity(6 * self.heads.len() + 10);
        for h in &self.heads {
            out.extend([&h.w_q, &h.b_q, &h.w_k, &h.b_k, &h.w_v, &h.b_v]);
        }
        out.extend([
            &self.w_o,
            &self.b_o,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]);
        out
    }

    pub fn refs_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::with_capacity(6 * self.heads.len() + 10);
        for h in &mut self.heads {
            out.extend([&mut h.w_q, &mut h.b_q, &mut h.w_k, &mut h.b_k, &mut h.w_v, &mut h.b_v]);
        }
        out.extend([
            &mut self.w_o,
            &mut self.b_o,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]);
        out
    }

    /// Group of every slot, in slot order.
    pub fn slot_groups(&self) -> Vec<ParamGroup> {
        let mut out = vec![ParamGroup::Msa; 6 * self.heads.len() + 2];
        out.extend([ParamGroup::Mlp; 4]);
        out.extend([ParamGroup::Ln; 4]);
        out
    }

    /// Pairs `self` with `other` slot by slot.
    pub fn zip_map<Q, R>(
        &self,
        other: &LayerParams<Q>,
        mut f: impl FnMut(ParamGroup, &P, &Q) -> Result<R>,
    ) -> Result<LayerParams<R>> {
        if self.heads.len() != other.heads.len() {
            return Err(contract(format!(
                "head count mismatch: {} vs {}",
                self.heads.len(),
                other.heads.len()
            )));
        }
        let others = other.refs();
        let groups = self.slot_groups();
        let mut i = 0;
        self.try_map(|p| {
            let r = f(groups[i], p, others[i]);
            i += 1;
            r
        })
    }
}

impl<T: Real> LayerParams<Tensor<T>> {
    /// Standard initialization: truncated-normal weights, zero biases, unit LN gain.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        LayerParams::slots(cfg).map(|s| init_slot(s, rng))
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        LayerParams::slots(cfg).map(|s| Tensor::zeros(&s.shape))
    }

    pub fn numel(&self) -> usize {
        self.refs().iter().map(|t| t.numel()).sum()
    }

    /// Verifies every tensor has the shape `cfg` requires.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let slots = LayerParams::slots(cfg);
        if slots.heads.len() != self.heads.len() {
            return Err(contract(format!(
                "layer has {} heads, config needs {}",
                self.heads.len(),
                slots.heads.len()
            )));
        }
        for (s, t) in slots.refs().into_iter().zip(self.refs()) {
            if t.shape() != s.shape.as_slice() {
                return Err(shape_err("layer params", &s.shape, t.shape()));
            }
        }
        Ok(())
    }

    /// `self + c·other`, slot by slot.
    pub fn add_scaled(&self, c: T, other: &Self) -> Result<Self> {
        self.zip_map(other, |_, a, b| a.zip_map(b, "add_scaled", |x, y| x + c * y))
    }

    /// Copies the slots of `groups` from `src` into `self`.
    pub fn copy_groups_from(&mut self, src: &Self, groups: GroupSet) -> Result<()> {
        if self.heads.len() != src.heads.len() {
            return Err(contract("head count mismatch"));
        }
        let gs = self.slot_groups();
        for ((dst, s), g) in self.refs_mut().into_iter().zip(src.refs()).zip(gs) {
            if groups.contains(g) {
                if dst.shape() != s.shape() {
                    return Err(shape_err("copy_groups_from", dst.shape(), s.shape()));
                }
                *dst = s.clone();
            }
        }
        Ok(())
    }

    /// Concatenated values of the slots in `groups`, as `f64`.
    pub fn flatten(&self, groups: GroupSet) -> Vec<f64> {
        self.refs()
            .into_iter()
            .zip(self.slot_groups())
            .filter(|(_, g)| groups.contains(*g))
            .flat_map(|(t, _)| t.data().iter().map(|v| v.to_f64_lossless()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> LayerParams<Tensor<U>> {
        self.map(|t| t.cast())
    }

    pub fn register(&self, rec: &mut ComputationRecord<T>) -> LayerParams<Var> {
        self.map(|t| rec.leaf(t.clone()))
    }
}

fn init_slot<T: Real, R: Rng + ?Sized>(slot: &Slot, rng: &mut R) -> Tensor<T> {
    let n = slot.name.as_str();
    if n.starts_with("gamma") {
        Tensor::ones(&slot.shape)
    } else if n.contains("b_") || n.starts_with('b') {
        Tensor::zeros(&slot.shape)
    } else {
        trunc_normal(&slot.shape, INIT_STD, rng)
    }
}

/// Parameters outside the encoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLayerParams<P> {
    /// `[p²·C, D]`
    pub patch_w: P,
    pub patch_b: P,
    /// `[N, D]`
    pub pos: P,
    /// `[D]`
    pub cls: P,
    pub norm_gamma: P,
    pub norm_beta: P,
    /// `[D, num_classes]`
    pub head_w: P,
    pub head_b: P,
}

/// Name and shape of a non-layer parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedShape {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

impl NonLayerParams<NamedShape> {
    pub fn slots(cfg: &ModelConfig) -> Self {
        let s = |name: &'static str, shape: &[usize]| NamedShape {
            name,
            shape: shape.to_vec(),
        };
        let d = cfg.dim;
        NonLayerParams {
            patch_w: s("patch_w", &[cfg.patch_dim(), d]),
            patch_b: s("patch_b", &[d]),
            pos: s("pos", &[cfg.seq_len(), d]),
            cls: s("cls", &[d]),
            norm_gamma: s("norm_gamma", &[d]),
            norm_beta: s("norm_beta", &[d]),
            head_w: s("head_w", &[d, cfg.num_classes]),
            head_b: s("head_b", &[cfg.num_classes]),
        }
    }
}

impl<P> NonLayerParams<P> {
    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&P) -> Result<Q, E>) -> Result<NonLayerParams<Q>, E> {
        Ok(NonLayerParams {
            patch_w: f(&self.patch_w)?,
            patch_b: f(&self.patch_b)?,
            pos: f(&self.pos)?,
            cls: f(&self.cls)?,
            norm_gamma: f(&self.norm_gamma)?,
            norm_beta: f(&self.norm_beta)?,
            head_w: f(&self.head_w)?,
            head_b: f(&self.head_b)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> NonLayerParams<Q> {
        self.try_map::<Q, std::convert::Infallible>(|p| Ok(f(p)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn refs(&self) -> Vec<&P> {
        vec![
            &self.patch_w,
            &self.patch_b,
            &self.pos,
            &self.cls,
            &self.norm_gamma,
            &self.norm_beta,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn refs_mut(&mut self) -> Vec<&mut P> {
        vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos,
            &mut self.cls,
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }
}

impl<T: Real> NonLayerParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let s = NonLayerParams::slots(cfg);
        NonLayerParams {
            patch_w: trunc_normal(&s.patch_w.shape, INIT_STD, rng),
            patch_b: Tensor::zeros(&s.patch_b.shape),
            pos: trunc_normal(&s.pos.shape, INIT_STD, rng),
            cls: trunc_normal(&s.cls.shape, INIT_STD, rng),
            norm_gamma: Tensor::ones(&s.norm_gamma.shape),
            norm_beta: Tensor::zeros(&s.norm_beta.shape),
            head_w: trunc_normal(&s.head_w.shape, INIT_STD, rng),
            head_b: Tensor::zeros(&s.head_b.shape),
        }
    }

    /// Fresh head sized for `num_classes`.
    pub fn reinit_head<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) {
        let d = self.cls.numel();
        self.head_w = trunc_normal(&[d, num_classes], INIT_STD, rng);
        self.head_b = Tensor::zeros(&[num_classes]);
    }

    pub fn numel(&self) -> usize {
        self.refs().iter().map(|t| t.numel()).sum()
    }

    /// Elements excluding the classification head.
    pub fn numel_without_head(&self) -> usize {
        self.numel() - self.head_w.numel() - self.head_b.numel()
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let slots = NonLayerParams::slots(cfg);
        for (s, t) in slots.refs().into_iter().zip(self.refs()) {
            if t.shape() != s.shape.as_slice() {
                return Err(shape_err(
                    if s.name == "pos" { "positional embeddings" } else { "non-layer params" },
                    &s.shape,
                    t.shape(),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> NonLayerParams<Tensor<U>> {
        self.map(|t| t.cast())
    }

    pub fn register(&self, rec: &mut ComputationRecord<T>) -> NonLayerParams<Var> {
        self.map(|t| rec.leaf(t.clone()))
    }
}

/// Splits `[B, C, H, W]` (or `[C, H, W]`) images into `[B, P, C·p·p]` patch rows.
///
/// Patches are taken in row-major grid order; each is flattened channel-major,
/// then by pixel row, then by pixel column.
pub fn patchify<T: Real>(images: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    let (b, c, h, w) = match s {
        [c, h, w] => (1, *c, *h, *w),
        [b, c, h, w] => (*b, *c, *h, *w),
        _ => return Err(shape_err("patchify", s, &[cfg.in_channels, cfg.image_size, cfg.image_size])),
    };
    if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
        return Err(shape_err("patchify", s, &[cfg.in_channels, cfg.image_size, cfg.image_size]));
    }
    let p = cfg.patch_size;
    let side = h / p;
    let pd = cfg.patch_dim();
    let mut out = Vec::with_capacity(b * side * side * pd);
    let data = images.data();
    for bi in 0..b {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ((bi * c + ch) * h + py * p + y) * w + px * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, side * side, pd], out))
}

fn as_batch<T: Real>(z: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match z.shape() {
        [n, d] => Ok((z.reshape(&[1, *n, *d])?, true)),
        [_, _, _] => Ok((z.clone(), false)),
        s => Err(contract(format!("expected [N, D] or [B, N, D], got {s:?}"))),
    }
}

fn unbatch<T: Real>(t: &Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        t.reshape(&t.shape()[1..])
    } else {
        Ok(t.clone())
    }
}

/// Runs a recorded computation and returns its output value.
fn evaluate<T: Real>(f: impl FnOnce(&mut ComputationRecord<T>) -> Result<Var>) -> Result<Tensor<T>> {
    let mut rec = ComputationRecord::new();
    let out = f(&mut rec)?;
    Ok(rec.value(out).clone())
}

/// Recorded forward passes over `[B, N, D]` token sequences.
pub mod record {
    use super::*;

    pub fn patch_embed<T: Real>(
        rec: &mut ComputationRecord<T>,
        images: &Tensor<T>,
        nlp: &NonLayerParams<Var>,
        cfg: &ModelConfig,
    ) -> Result<Var> {
        let patches = rec.leaf(patchify(images, cfg)?);
        let proj = rec.matmul(patches, nlp.patch_w)?;
        let proj = rec.add_broadcast(proj, nlp.patch_b)?;
        let seq = rec.prepend_token(proj, nlp.cls)?;
        rec.add_broadcast(seq, nlp.pos)
    }

    pub fn attention_head<T: Real>(
        rec: &mut ComputationRecord<T>,
        z: Var,
        head: &HeadParams<Var>,
    ) -> Result<Var> {
        let q = rec.matmul(z, head.w_q)?;
        let q = rec.add_broadcast(q, head.b_q)?;
        let k = rec.matmul(z, head.w_k)?;
        let k = rec.add_broadcast(k, head.b_k)?;
        let v = rec.matmul(z, head.w_v)?;
        let v = rec.add_broadcast(v, head.b_v)?;
        let d = rec.value(q).shape()[2];
        let logits = rec.bmm(q, k, true)?;
        let logits = rec.scale(logits, T::one() / T::from_usize(d).unwrap().sqrt());
        let attn = rec.softmax(logits)?;
        rec.bmm(attn, v, false)
    }

    pub fn msa<T: Real>(rec: &mut ComputationRecord<T>, z: Var, lp: &LayerParams<Var>) -> Result<Var> {
        let heads = lp
            .heads
            .iter()
            .map(|h| attention_head(rec, z, h))
            .collect::<Result<Vec<_>>>()?;
        let cat = rec.concat_last(&heads)?;
        let out = rec.matmul(cat, lp.w_o)?;
        rec.add_broadcast(out, lp.b_o)
    }

    pub fn mlp<T: Real>(rec: &mut ComputationRecord<T>, x: Var, lp: &LayerParams<Var>) -> Result<Var> {
        let h = rec.matmul(x, lp.w1)?;
        let h = rec.add_broadcast(h, lp.b1)?;
        let h = rec.gelu(h);
        let o = rec.matmul(h, lp.w2)?;
        rec.add_broadcast(o, lp.b2)
    }

    /// Pre-LN block: `z' = z + MSA(LN₁(z))`, `out = z' + MLP(LN₂(z'))`.
    pub fn encoder_layer<T: Real>(
        rec: &mut ComputationRecord<T>,
        z: Var,
        lp: &LayerParams<Var>,
    ) -> Result<Var> {
        let eps = T::lit(LN_EPS);
        let n1 = rec.layer_norm(z, lp.ln1_gamma, lp.ln1_beta, eps)?;
        let a = msa(rec, n1, lp)?;
        let z1 = rec.add(z, a)?;
        let n2 = rec.layer_norm(z1, lp.ln2_gamma, lp.ln2_beta, eps)?;
        let m = mlp(rec, n2, lp)?;
        rec.add(z1, m)
    }

    /// Logits `[B, num_classes]`.
    pub fn forward<T: Real>(
        rec: &mut ComputationRecord<T>,
        images: &Tensor<T>,
        layers: &[LayerParams<Var>],
        nlp: &NonLayerParams<Var>,
        cfg: &ModelConfig,
    ) -> Result<Var> {
        if layers.len() != cfg.depth {
            return Err(contract(format!(
                "{} layers supplied for a depth-{} model",
                layers.len(),
                cfg.depth
            )));
        }
        let mut z = patch_embed(rec, images, nlp, cfg)?;
        for lp in layers {
            z = encoder_layer(rec, z, lp)?;
        }
        let z = rec.layer_norm(z, nlp.norm_gamma, nlp.norm_beta, T::lit(LN_EPS))?;
        let cls = rec.select_token(z, 0)?;
        let logits = rec.matmul(cls, nlp.head_w)?;
        rec.add_broadcast(logits, nlp.head_b)
    }
}

/// Token embeddings `[N, D]` for one image `[C, H, W]`, or `[B, N, D]` for a batch.
pub fn patch_embed<T: Real>(
    image: &Tensor<T>,
    nlp: &NonLayerParams<Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let single = image.rank() == 3;
    let out = evaluate(|rec| {
        let nv = nlp.register(rec);
        record::patch_embed(rec, image, &nv, cfg)
    })?;
    unbatch(&out, single)
}

/// `softmax(QKᵀ/√d)V` for one head over `[N, D]` or `[B, N, D]` tokens.
pub fn attention_head<T: Real>(z: &Tensor<T>, head: &HeadParams<Tensor<T>>) -> Result<Tensor<T>> {
    let (zb, squeeze) = as_batch(z)?;
    let out = evaluate(|rec| {
        let zv = rec.leaf(zb);
        let hv = HeadParams {
            w_q: rec.leaf(head.w_q.clone()),
            b_q: rec.leaf(head.b_q.clone()),
            w_k: rec.leaf(head.w_k.clone()),
            b_k: rec.leaf(head.b_k.clone()),
            w_v: rec.leaf(head.w_v.clone()),
            b_v: rec.leaf(head.b_v.clone()),
        };
        record::attention_head(rec, zv, &hv)
    })?;
    unbatch(&out, squeeze)
}

/// Multi-head self-attention: concatenated heads projected by `W_O` plus `b_O`.
pub fn msa<T: Real>(z: &Tensor<T>, lp: &LayerParams<Tensor<T>>) -> Result<Tensor<T>> {
    let (zb, squeeze) = as_batch(z)?;
    let out = evaluate(|rec| {
        let zv = rec.leaf(zb);
        let lv = lp.register(rec);
        record::msa(rec, zv, &lv)
    })?;
    unbatch(&out, squeeze)
}

pub fn encoder_layer<T: Real>(z: &Tensor<T>, lp: &LayerParams<Tensor<T>>) -> Result<Tensor<T>> {
    let (zb, squeeze) = as_batch(z)?;
    let out = evaluate(|rec| {
        let zv = rec.leaf(zb);
        let lv = lp.register(rec);
        record::encoder_layer(rec, zv, &lv)
    })?;
    unbatch(&out, squeeze)
}

/// Logits `[num_classes]` for one image or `[B, num_classes]` for a batch.
pub fn forward<T: Real>(
    images: &Tensor<T>,
    layers: &[LayerParams<Tensor<T>>],
    nlp: &NonLayerParams<Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let single = images.rank() == 3;
    let out = evaluate(|rec| {
        let lv: Vec<_> = layers.iter().map(|l| l.register(rec)).collect();
        let nv = nlp.register(rec);
        record::forward(rec, images, &lv, &nv, cfg)
    })?;
    unbatch(&out, single)
}

/// A complete classifier with materialized, independently stored layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Vit<T: Real = f32> {
    pub cfg: ModelConfig,
    pub layers: Vec<LayerParams<Tensor<T>>>,
    pub nlp: NonLayerParams<Tensor<T>>,
}

impl<T: Real> Vit<T> {
    /// Randomly initialized model.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nlp = NonLayerParams::init(&cfg, &mut rng);
        let layers = (0..cfg.depth).map(|_| LayerParams::init(&cfg, &mut rng)).collect();
        Ok(Self { cfg, layers, nlp })
    }

    pub fn from_parts(
        cfg: ModelConfig,
        layers: Vec<LayerParams<Tensor<T>>>,
        nlp: NonLayerParams<Tensor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if layers.len() != cfg.depth {
            return Err(contract(format!("{} layers for depth {}", layers.len(), cfg.depth)));
        }
        for l in &layers {
            l.check_shapes(&cfg)?;
        }
        nlp.check_shapes(&cfg)?;
        Ok(Self { cfg, layers, nlp })
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        forward(images, &self.layers, &self.nlp, &self.cfg)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.numel()).sum::<usize>() + self.nlp.numel()
    }

    pub fn cast<U: Real>(&self) -> Vit<U> {
        Vit {
            cfg: self.cfg,
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            nlp: self.nlp.cast(),
        }
    }

    /// All tensors, layers first (in order) then non-layer parameters.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<_> = self.layers.iter().flat_map(|l| l.refs()).collect();
        out.extend(self.nlp.refs());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<_> = self.layers.iter_mut().flat_map(|l| l.refs_mut()).collect();
        out.extend(self.nlp.refs_mut());
        out
    }
}
