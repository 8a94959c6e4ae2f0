//! The two-stream EWasteNet classifier.
//!
//! ```text
//! image ─┬─ luma → Sobel (frozen) → 3×3 adapter → DeiT ──┐
//!        │                                              concat → MLP → softmax
//!        └─ ASPP → CBAM → 3×3 adapter → DeiT ───────────┘
//! ```

use serde::{Deserialize, Serialize};

use crate::deit::{deit_forward, init_backbone, DeiTConfig};
use crate::params::{Initializer, ParamStore, Scope};
use crate::rng::SeededRng;
use crate::tensor::{ConvSpec, Element, GradCheckReport, PoolKind, PoolOver, Tensor};
use crate::{Error, Result};

/// ITU-R BT.601 luma weights used for the edge stream's grayscale input.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Horizontal Sobel kernel; the vertical kernel is its transpose.
pub const SOBEL_GX: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SobelMode {
    #[default]
    GxGy,
    GxOnly,
}

impl SobelMode {
    pub fn channels(self) -> usize {
        match self {
            SobelMode::GxGy => 2,
            SobelMode::GxOnly => 1,
        }
    }

    /// Kernel weights in OIKK layout, `[channels, 1, 3, 3]`.
    pub fn kernels(self) -> Vec<f32> {
        let gx: Vec<f32> = SOBEL_GX.iter().flatten().copied().collect();
        let gy: Vec<f32> = (0..9).map(|i| SOBEL_GX[i % 3][i / 3]).collect();
        match self {
            SobelMode::GxGy => [gx, gy].concat(),
            SobelMode::GxOnly => gx,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbamOrder {
    #[default]
    SpatialFirst,
    ChannelFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsppConfig {
    pub branch_dilations: Vec<usize>,
    pub branch_filters: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for AsppConfig {
    fn default() -> Self {
        Self {
            branch_dilations: vec![1, 2, 3, 4, 5],
            branch_filters: vec![64, 32, 16, 8, 4],
            kernel_size: 3,
        }
    }
}

impl AsppConfig {
    pub fn out_channels(&self) -> usize {
        self.branch_filters.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbamConfig {
    pub channel_reduction: usize,
    pub spatial_kernel: usize,
    pub order: CbamOrder,
}

impl Default for CbamConfig {
    fn default() -> Self {
        // 124 ASPP channels are divisible by 4 (hidden width 31) but not by 8.
        Self {
            channel_reduction: 4,
            spatial_kernel: 7,
            order: CbamOrder::SpatialFirst,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Hidden layer widths: two FC layers and the bottleneck.
    pub hidden: Vec<usize>,
    /// Dropout after hidden layer `i`, for the first `dropout.len()` layers.
    pub dropout: Vec<f64>,
    pub num_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 256, 256],
            dropout: vec![0.3, 0.2],
            num_classes: 8,
        }
    }
}

/// Transformer size shared by both streams. Image dims and input channels
/// come from the enclosing model config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let d = DeiTConfig::default();
        Self {
            patch_size: d.patch_size,
            embed_dim: d.embed_dim,
            depth: d.depth,
            num_heads: d.num_heads,
            mlp_ratio: d.mlp_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EWasteNetConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Channels produced by each stream's adapter and consumed by its backbone.
    pub adapter_channels: usize,
    pub sobel_mode: SobelMode,
    pub backbone: BackboneConfig,
    pub aspp: AsppConfig,
    pub cbam: CbamConfig,
    pub fusion: FusionConfig,
}

impl Default for EWasteNetConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            adapter_channels: 3,
            sobel_mode: SobelMode::GxGy,
            backbone: BackboneConfig::default(),
            aspp: AsppConfig::default(),
            cbam: CbamConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl EWasteNetConfig {
    /// The small configuration used for end-to-end gradient checks:
    /// 16×16 input, patch 8, D = 16, depth 1, ASPP filters [4,2,2,1,1].
    pub fn toy() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            backbone: BackboneConfig {
                patch_size: 8,
                embed_dim: 16,
                depth: 1,
                num_heads: 2,
                mlp_ratio: 2.0,
            },
            aspp: AsppConfig {
                branch_filters: vec![4, 2, 2, 1, 1],
                ..AsppConfig::default()
            },
            cbam: CbamConfig {
                channel_reduction: 2,
                ..CbamConfig::default()
            },
            ..Self::default()
        }
    }

    /// Both streams' backbones see the same spatial dims.
    pub fn deit(&self) -> DeiTConfig {
        DeiTConfig {
            patch_size: self.backbone.patch_size,
            embed_dim: self.backbone.embed_dim,
            depth: self.backbone.depth,
            num_heads: self.backbone.num_heads,
            mlp_ratio: self.backbone.mlp_ratio,
            input_channels: self.adapter_channels,
            image_h: self.image_h,
            image_w: self.image_w,
        }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(msg)) = self.deit().validate() {
            problems.push(msg);
        }
        if self.adapter_channels == 0 {
            problems.push("adapter_channels must be positive".into());
        }
        let a = &self.aspp;
        if a.branch_dilations.len() != a.branch_filters.len() || a.branch_filters.is_empty() {
            problems.push(format!(
                "aspp: {} dilations but {} filter counts",
                a.branch_dilations.len(),
                a.branch_filters.len()
            ));
        }
        if a.branch_filters.contains(&0) || a.branch_dilations.contains(&0) {
            problems.push("aspp: filters and dilations must be positive".into());
        }
        if a.kernel_size.is_multiple_of(2) {
            problems.push(format!("aspp: kernel_size {} must be odd", a.kernel_size));
        }
        let c = &self.cbam;
        let channels = a.out_channels();
        if c.channel_reduction == 0 || !channels.is_multiple_of(c.channel_reduction) {
            problems.push(format!(
                "cbam: channel_reduction {} must divide the {} attended channels",
                c.channel_reduction, channels
            ));
        }
        if c.spatial_kernel.is_multiple_of(2) {
            problems.push(format!("cbam: spatial_kernel {} must be odd", c.spatial_kernel));
        }
        let f = &self.fusion;
        if f.hidden.is_empty() || f.hidden.contains(&0) {
            problems.push("fusion: hidden widths must be non-empty and positive".into());
        }
        if f.dropout.len() > f.hidden.len() {
            problems.push(format!(
                "fusion: {} dropout rates for {} hidden layers",
                f.dropout.len(),
                f.hidden.len()
            ));
        }
        if let Some(p) = f.dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            problems.push(format!("fusion: dropout rate {p} outside [0, 1)"));
        }
        if f.num_classes < 2 {
            problems.push(format!("fusion: num_classes {} must be at least 2", f.num_classes));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn cbam_hidden(&self) -> usize {
        self.aspp.out_channels() / self.cbam.channel_reduction
    }

    /// Closed-form element counts per component, in table order.
    pub fn analytic_budget(&self) -> Vec<BudgetRow> {
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let lin = |i: usize, o: usize| i * o + o;
        let (s, a, k) = (self.sobel_mode.channels(), self.adapter_channels, self.aspp.kernel_size);
        let c = self.aspp.out_channels();
        let h = self.cbam_hidden();
        let sk = self.cbam.spatial_kernel;
        let mut widths = vec![2 * self.backbone.embed_dim];
        widths.extend(&self.fusion.hidden);
        widths.push(self.fusion.num_classes);
        let head = widths.windows(2).map(|w| lin(w[0], w[1])).sum();
        let deit = self.deit().param_count();
        vec![
            BudgetRow::new("edge.sobel", 0, s * 9),
            BudgetRow::new("edge.adapter", conv(a, s, 3), 0),
            BudgetRow::new("edge.deit", deit, 0),
            BudgetRow::new("pyramid.aspp", self.aspp.branch_filters.iter().map(|&f| conv(f, 3, k)).sum(), 0),
            BudgetRow::new("pyramid.cbam", lin(c, h) + lin(h, c) + conv(1, 2, sk), 0),
            BudgetRow::new("pyramid.adapter", conv(a, c, 3), 0),
            BudgetRow::new("pyramid.deit", deit, 0),
            BudgetRow::new("head", head, 0),
        ]
    }
}

/// Trainable and frozen element counts of one component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BudgetRow {
    pub component: String,
    pub trainable: usize,
    pub frozen: usize,
}

impl BudgetRow {
    fn new(component: &str, trainable: usize, frozen: usize) -> Self {
        Self {
            component: component.to_string(),
            trainable,
            frozen,
        }
    }
}

/// Renders budget rows as an aligned text table with a total line.
pub fn render_budget(rows: &[BudgetRow]) -> String {
    let mut out = format!("{:<18}{:>12}{:>10}\n", "component", "trainable", "frozen");
    for r in rows {
        out += &format!("{:<18}{:>12}{:>10}\n", r.component, r.trainable, r.frozen);
    }
    let (t, f) = rows.iter().fold((0, 0), |(t, f), r| (t + r.trainable, f + r.frozen));
    out += &format!("{:<18}{:>12}{:>10}\n", "total", t, f);
    out
}

/// `(trainable, frozen)` element counts.
pub fn count_trainable_parameters<E: Element>(params: &ParamStore<E>) -> (usize, usize) {
    params.count()
}

/// Forward-pass mode. Dropout is active only in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeededRng),
}

fn same_conv<E: Element>(x: &Tensor<E>, p: &Scope<'_, E>, dilation: usize) -> Result<Tensor<E>> {
    x.conv2d(p.get("weight")?, Some(p.get("bias")?), ConvSpec::same(dilation))
}

/// Luma conversion as a fixed 1×1 convolution, `[N,3,H,W] → [N,1,H,W]`.
pub fn to_luma<E: Element>(images: &Tensor<E>) -> Result<Tensor<E>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(format!("expected [N, 3, H, W] images, got {s:?}")));
    }
    let w = Tensor::new(LUMA.iter().map(|&v| E::lit(v)).collect(), &[1, 3, 1, 1])?;
    images.conv2d(&w, None, ConvSpec::same(1))
}

/// Pads H and W by one pixel on each side, repeating the border values.
fn replicate_pad1<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut x = x.clone();
    for axis in [2, 3] {
        let last = x.shape()[axis] - 1;
        x = Tensor::concat(&[x.narrow(axis, 0, 1)?, x.clone(), x.narrow(axis, last, 1)?], axis)?;
    }
    Ok(x)
}

/// Applies the Sobel kernels to a single-channel batch, preserving H and W.
/// Borders are replicated so that flat regions (including image edges) give
/// exactly zero response. Channel 0 is the horizontal gradient, channel 1
/// (if present) the vertical one.
pub fn sobel_apply<E: Element>(gray: &Tensor<E>, kernels: &Tensor<E>) -> Result<Tensor<E>> {
    let s = gray.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(format!(
            "sobel expects a single-channel [N, 1, H, W] input, got {s:?}"
        )));
    }
    replicate_pad1(gray)?.conv2d(kernels, None, ConvSpec::valid(1))
}

pub fn edge_stream_forward<E: Element>(images: &Tensor<E>, cfg: &EWasteNetConfig, params: &ParamStore<E>) -> Result<Tensor<E>> {
    let p = params.scope("edge");
    let edges = sobel_apply(&to_luma(images)?, p.get("sobel.kernel")?)?;
    let adapted = same_conv(&edges, &p.sub("adapter"), 1)?;
    deit_forward(&adapted, &cfg.deit(), &p.sub("deit"))
}

/// Parallel dilated convolutions with ReLU, concatenated along channels.
pub fn aspp_forward<E: Element>(x: &Tensor<E>, cfg: &AsppConfig, p: &Scope<'_, E>) -> Result<Tensor<E>> {
    let branches = cfg
        .branch_dilations
        .iter()
        .enumerate()
        .map(|(k, &d)| Ok(same_conv(x, &p.sub(&format!("branch{k}")), d)?.relu()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&branches, 1)
}

#[derive(Debug)]
pub struct CbamOutput<E: Element> {
    pub output: Tensor<E>,
    /// `[N, 1, H, W]`
    pub spatial_gate: Tensor<E>,
    /// `[N, C, 1, 1]`
    pub channel_gate: Tensor<E>,
}

/// Sigmoid of a k×k convolution over the channel-mean and channel-max maps.
pub fn spatial_gate<E: Element>(x: &Tensor<E>, p: &Scope<'_, E>) -> Result<Tensor<E>> {
    let pooled = Tensor::concat(
        &[
            x.pool_global(PoolKind::Avg, PoolOver::Channel)?,
            x.pool_global(PoolKind::Max, PoolOver::Channel)?,
        ],
        1,
    )?;
    Ok(same_conv(&pooled, p, 1)?.sigmoid())
}

/// Sigmoid of a shared MLP applied to global average and max pooling.
pub fn channel_gate<E: Element>(x: &Tensor<E>, p: &Scope<'_, E>) -> Result<Tensor<E>> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mlp = |kind| -> Result<Tensor<E>> {
        let v = x.pool_global(kind, PoolOver::Spatial)?.reshape(&[n, c])?;
        p.linear("fc2", &p.linear("fc1", &v)?.relu())
    };
    mlp(PoolKind::Avg)?
        .add(&mlp(PoolKind::Max)?)?
        .sigmoid()
        .reshape(&[n, c, 1, 1])
}

pub fn cbam_forward<E: Element>(x: &Tensor<E>, cfg: &CbamConfig, p: &Scope<'_, E>) -> Result<CbamOutput<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("cbam expects NCHW, got {s:?}")));
    }
    if cfg.channel_reduction == 0 || !s[1].is_multiple_of(cfg.channel_reduction) {
        return Err(Error::shape(format!(
            "cbam: {} channels are not divisible by reduction {}",
            s[1], cfg.channel_reduction
        )));
    }
    let (sp, ch) = (p.sub("spatial"), p.sub("channel"));
    Ok(match cfg.order {
        CbamOrder::SpatialFirst => {
            let spatial_gate = spatial_gate(x, &sp)?;
            let mid = x.mul(&spatial_gate)?;
            let channel_gate = channel_gate(&mid, &ch)?;
            CbamOutput {
                output: mid.mul(&channel_gate)?,
                spatial_gate,
                channel_gate,
            }
        }
        CbamOrder::ChannelFirst => {
            let channel_gate = channel_gate(x, &ch)?;
            let mid = x.mul(&channel_gate)?;
            let spatial_gate = spatial_gate(&mid, &sp)?;
            CbamOutput {
                output: mid.mul(&spatial_gate)?,
                spatial_gate,
                channel_gate,
            }
        }
    })
}

pub fn pyramid_stream_forward<E: Element>(
    images: &Tensor<E>,
    cfg: &EWasteNetConfig,
    params: &ParamStore<E>,
) -> Result<Tensor<E>> {
    let p = params.scope("pyramid");
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(format!("expected [N, 3, H, W] images, got {s:?}")));
    }
    let pyramid = aspp_forward(images, &cfg.aspp, &p.sub("aspp"))?;
    let attended = cbam_forward(&pyramid, &cfg.cbam, &p.sub("cbam"))?.output;
    let adapted = same_conv(&attended, &p.sub("adapter"), 1)?;
    deit_forward(&adapted, &cfg.deit(), &p.sub("deit"))
}

fn head_layer_names(cfg: &FusionConfig) -> Vec<String> {
    (1..=cfg.hidden.len()).map(|i| format!("fc{i}")).chain(["classifier".to_string()]).collect()
}

/// Concatenates the stream features and returns class logits.
pub fn fusion_head_logits<E: Element>(
    f1: &Tensor<E>,
    f2: &Tensor<E>,
    cfg: &FusionConfig,
    p: &Scope<'_, E>,
    mode: &mut Mode<'_>,
) -> Result<Tensor<E>> {
    if f1.shape() != f2.shape() || f1.rank() != 2 {
        return Err(Error::shape(format!(
            "fusion head needs matching [N, D] features, got {:?} and {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    let names = head_layer_names(cfg);
    let mut x = Tensor::concat(&[f1.clone(), f2.clone()], 1)?;
    for (i, name) in names[..cfg.hidden.len()].iter().enumerate() {
        x = p.linear(name, &x)?.relu();
        if let (Some(&rate), Mode::Train(rng)) = (cfg.dropout.get(i), &mut *mode) {
            x = x.dropout(rate, true, rng)?;
        }
    }
    p.linear(names.last().expect("classifier"), &x)
}

/// Class probabilities; each row sums to one.
pub fn fusion_head_forward<E: Element>(
    f1: &Tensor<E>,
    f2: &Tensor<E>,
    cfg: &FusionConfig,
    p: &Scope<'_, E>,
    mode: &mut Mode<'_>,
) -> Result<Tensor<E>> {
    fusion_head_logits(f1, f2, cfg, p, mode)?.softmax(1)
}

/// A configured network and its parameters.
#[derive(Clone, Debug)]
pub struct EWasteNet<E: Element = f32> {
    pub config: EWasteNetConfig,
    pub params: ParamStore<E>,
}

/// Backbone parameter prefixes, for freezing.
pub const BACKBONES: [&str; 2] = ["edge.deit.", "pyramid.deit."];

/// Builds the network with deterministic initial parameters: edge stream,
/// then pyramid stream, then fusion head.
pub fn build_model(cfg: &EWasteNetConfig, seed: u64) -> Result<EWasteNet> {
    cfg.validate()?;
    let init = Initializer::new(seed);
    let mut s = ParamStore::new();
    let (a, c) = (cfg.adapter_channels, cfg.aspp.out_channels());

    let sm = cfg.sobel_mode;
    s.insert_constant("edge.sobel.kernel", sm.kernels(), &[sm.channels(), 1, 3, 3])?;
    init.conv(&mut s, "edge.adapter", a, sm.channels(), 3)?;
    init_backbone(&mut s, "edge.deit", &cfg.deit(), &init)?;

    for (k, &f) in cfg.aspp.branch_filters.iter().enumerate() {
        init.conv(&mut s, &format!("pyramid.aspp.branch{k}"), f, 3, cfg.aspp.kernel_size)?;
    }
    init.linear(&mut s, "pyramid.cbam.channel.fc1", c, cfg.cbam_hidden())?;
    init.linear(&mut s, "pyramid.cbam.channel.fc2", cfg.cbam_hidden(), c)?;
    init.conv(&mut s, "pyramid.cbam.spatial", 1, 2, cfg.cbam.spatial_kernel)?;
    init.conv(&mut s, "pyramid.adapter", a, c, 3)?;
    init_backbone(&mut s, "pyramid.deit", &cfg.deit(), &init)?;

    let mut width = 2 * cfg.backbone.embed_dim;
    let outs = cfg.fusion.hidden.iter().chain([&cfg.fusion.num_classes]);
    for (name, &out) in head_layer_names(&cfg.fusion).iter().zip(outs) {
        init.linear(&mut s, &format!("head.{name}"), width, out)?;
        width = out;
    }
    Ok(EWasteNet {
        config: cfg.clone(),
        params: s,
    })
}

impl<E: Element> EWasteNet<E> {
    /// Both streams read the same image batch.
    pub fn forward_logits(&self, images: &Tensor<E>, mode: &mut Mode<'_>) -> Result<Tensor<E>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.image_h || s[3] != self.config.image_w {
            return Err(Error::shape(format!(
                "model expects [N, 3, {}, {}] images, got {s:?}",
                self.config.image_h, self.config.image_w
            )));
        }
        let f1 = edge_stream_forward(images, &self.config, &self.params)?;
        let f2 = pyramid_stream_forward(images, &self.config, &self.params)?;
        fusion_head_logits(&f1, &f2, &self.config.fusion, &self.params.scope("head"), mode)
    }

    pub fn forward(&self, images: &Tensor<E>, mode: &mut Mode<'_>) -> Result<Tensor<E>> {
        self.forward_logits(images, mode)?.softmax(1)
    }

    /// Mean cross-entropy of the batch.
    pub fn loss(&self, images: &Tensor<E>, labels: &[usize], mode: &mut Mode<'_>) -> Result<Tensor<E>> {
        self.forward_logits(images, mode)?.cross_entropy(labels)
    }

    pub fn cast<F: Element>(&self) -> EWasteNet<F> {
        EWasteNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Freezes (or unfreezes) both transformer backbones.
    pub fn freeze_backbones(&mut self, frozen: bool) {
        for prefix in BACKBONES {
            self.params.set_frozen(prefix, frozen);
        }
    }

    /// Measured counts per component, in the same order as the analytic budget.
    pub fn parameter_table(&self) -> Vec<BudgetRow> {
        self.config
            .analytic_budget()
            .into_iter()
            .map(|row| {
                let prefix = format!("{}.", row.component);
                let (t, f) = self
                    .params
                    .iter()
                    .filter(|(n, _)| n.starts_with(&prefix))
                    .fold((0, 0), |(t, f), (_, p)| {
                        if p.frozen {
                            (t, f + p.tensor.numel())
                        } else {
                            (t + p.tensor.numel(), f)
                        }
                    });
                BudgetRow::new(&row.component, t, f)
            })
            .collect()
    }
}

/// One sampled coordinate of a parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCoord {
    pub name: String,
    pub index: usize,
}

/// Whether a coordinate's true gradient is identically zero by symmetry: the
/// key bias shifts every score of a softmax row by the same amount.
pub fn structurally_zero(cfg: &EWasteNetConfig, name: &str, index: usize) -> bool {
    let d = cfg.backbone.embed_dim;
    name.ends_with(".attn.qkv.bias") && (d..2 * d).contains(&index)
}

/// Random trainable coordinates: at least `per_tensor` from every trainable
/// tensor (where available), then uniformly over all remaining coordinates
/// until `total` are chosen. Structurally zero coordinates are skipped.
pub fn sample_coords<E: Element>(model: &EWasteNet<E>, total: usize, per_tensor: usize, seed: u64) -> Vec<ParamCoord> {
    let mut rng = SeededRng::new(seed);
    let candidates: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(name, p)| {
            let idx = (0..p.tensor.numel())
                .filter(|&i| !structurally_zero(&model.config, name, i))
                .collect();
            (name.to_string(), idx)
        })
        .collect();
    let mut chosen = std::collections::BTreeSet::new();
    for (name, idx) in &candidates {
        let mut idx = idx.clone();
        rng.shuffle(&mut idx);
        for &i in idx.iter().take(per_tensor) {
            chosen.insert((name.clone(), i));
        }
    }
    let pool: Vec<(&String, usize)> = candidates
        .iter()
        .flat_map(|(n, idx)| idx.iter().map(move |&i| (n, i)))
        .collect();
    let target = total.min(pool.len());
    while chosen.len() < target {
        let (n, i) = pool[rng.below(pool.len())];
        chosen.insert((n.clone(), i));
    }
    chosen
        .into_iter()
        .map(|(name, index)| ParamCoord { name, index })
        .collect()
}

/// Central finite-difference check of the full model's cross-entropy loss at
/// the listed coordinates, in inference mode, with both analytic and numeric
/// gradients in f64.
pub fn gradcheck_model(
    model: &EWasteNet,
    images: &Tensor,
    labels: &[usize],
    coords: &[ParamCoord],
    eps: f64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::arg("gradcheck: eps must be positive"));
    }
    let m = model.cast::<f64>();
    let x = images.cast::<f64>();
    let loss = m.loss(&x, labels, &mut Mode::Eval)?;
    loss.backward()?;
    let mut pairs = Vec::with_capacity(coords.len());
    for c in coords {
        let t = m.params.get(&c.name)?;
        if c.index >= t.numel() {
            return Err(Error::arg(format!("gradcheck: {}[{}] out of range", c.name, c.index)));
        }
        let analytic = t.grad().map_or(0.0, |g| g[c.index]);
        let at = |delta: f64| -> Result<f64> {
            let mut shifted = m.clone();
            let mut data = t.to_vec();
            data[c.index] += delta;
            shifted.params.set_data(&c.name, data)?;
            shifted.loss(&x, labels, &mut Mode::Eval)?.item()
        };
        pairs.push((analytic, (at(eps)? - at(-eps)?) / (2.0 * eps)));
    }
    Ok(GradCheckReport::from_pairs(pairs))
}
