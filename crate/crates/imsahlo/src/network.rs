//! The segmentation network: an encoder-decoder with multi-scale dense
//! blocks (MSDB), hierarchical attention (HA) gating on the bottleneck and
//! the skip connections, and a sigmoid head.
//!
//! Ablation variants swap MSDBs for plain residual blocks and HA for
//! squeeze-excitation (or nothing), which yields the four-model grid used
//! by the architecture study.
//!
//! Encoder stage i produces `base_channels * 2^i` channels and halves the
//! spatial dims; the decoder mirrors it with bilinear upsampling + conv.
//! GroupNorm keeps normalization batch-independent; Swish is the block
//! activation; SpatialDropout (whole-channel) regularizes block outputs
//! during training.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input {h}x{w} not divisible by 2^{depth}")]
    IndivisibleInput { h: usize, w: usize, depth: usize },
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint config does not match the requested config")]
    ConfigMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Parallel dilated branches, dense concat, 1x1 fusion, residual add.
    Msdb,
    /// Plain two-conv residual block (ablation baseline).
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Channel attention then spatial attention.
    Ha,
    /// Squeeze-excitation channel attention only.
    Se,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub msdb_dilations: Vec<usize>,
    pub ha_channel_reduction: usize,
    pub ha_spatial_kernel: usize,
    pub groupnorm_groups: usize,
    pub spatial_dropout_rate: f64,
    pub block: BlockKind,
    pub attention: AttentionKind,
    /// Foreground prior used to initialize the head bias.
    pub head_foreground_prior: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            msdb_dilations: vec![1, 2, 4],
            ha_channel_reduction: 8,
            ha_spatial_kernel: 7,
            groupnorm_groups: 8,
            spatial_dropout_rate: 0.1,
            block: BlockKind::Msdb,
            attention: AttentionKind::Ha,
            head_foreground_prior: 0.02,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale variant: depth 3, 8 base channels.
    pub fn toy() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(NetworkError::InvalidConfig(
                "depth and base_channels must be positive".into(),
            ));
        }
        if self.base_channels % self.groupnorm_groups != 0 {
            return Err(NetworkError::InvalidConfig(format!(
                "base_channels {} must be divisible by groupnorm_groups {}",
                self.base_channels, self.groupnorm_groups
            )));
        }
        if self.block == BlockKind::Msdb && self.msdb_dilations.is_empty() {
            return Err(NetworkError::InvalidConfig(
                "msdb_dilations must not be empty".into(),
            ));
        }
        if self.ha_spatial_kernel % 2 == 0 {
            return Err(NetworkError::InvalidConfig(
                "ha_spatial_kernel must be odd".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.spatial_dropout_rate) {
            return Err(NetworkError::InvalidConfig(
                "spatial_dropout_rate must be in [0, 1)".into(),
            ));
        }
        if !(0.0 < self.head_foreground_prior && self.head_foreground_prior < 1.0) {
            return Err(NetworkError::InvalidConfig(
                "head_foreground_prior must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

// ---------------------------------------------------------------------------
// parameter store and layer descriptions
// ---------------------------------------------------------------------------

type PId = usize;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Tensor) -> PId {
        self.entries.push(ParamEntry { name, value });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: PId,
    b: PId,
    dilation: usize,
}

#[derive(Clone, Debug)]
struct NormLayer {
    gamma: PId,
    beta: PId,
    groups: usize,
}

#[derive(Clone, Debug)]
struct MsdbBlock {
    branches: Vec<(ConvLayer, NormLayer)>,
    fuse: ConvLayer,
    proj: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: ConvLayer,
    norm1: NormLayer,
    conv2: ConvLayer,
    norm2: NormLayer,
    proj: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
enum Block {
    Msdb(MsdbBlock),
    Residual(ResidualBlock),
}

#[derive(Clone, Debug)]
struct SeBlock {
    fc1: ConvLayer,
    fc2: ConvLayer,
}

#[derive(Clone, Debug)]
struct HaBlock {
    fc1: ConvLayer,
    fc2: ConvLayer,
    spatial: ConvLayer,
}

#[derive(Clone, Debug)]
enum Attention {
    None,
    Se(SeBlock),
    Ha(HaBlock),
}

#[derive(Clone, Debug)]
struct UpLayer {
    conv: ConvLayer,
    norm: NormLayer,
}

/// Builder that owns the store and the init RNG while layers are created.
struct NetBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    groups: usize,
}

impl NetBuilder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, dilation: usize) -> ConvLayer {
        let fan_in = (cin * k * k) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let mut w = Tensor::zeros([cout, cin, k, k]);
        for v in w.data_mut() {
            *v = dist.sample(&mut self.rng);
        }
        let b = Tensor::zeros([1, 1, 1, cout]);
        ConvLayer {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), b),
            dilation,
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> NormLayer {
        let groups = if channels % self.groups == 0 {
            self.groups
        } else {
            1
        };
        NormLayer {
            gamma: self
                .store
                .add(format!("{name}.gamma"), Tensor::full([1, 1, 1, channels], 1.0)),
            beta: self
                .store
                .add(format!("{name}.beta"), Tensor::zeros([1, 1, 1, channels])),
            groups,
        }
    }

    fn block(&mut self, name: &str, kind: BlockKind, dilations: &[usize], cin: usize, cout: usize) -> Block {
        let proj = (cin != cout).then(|| self.conv(&format!("{name}.proj"), cin, cout, 1, 1));
        match kind {
            BlockKind::Msdb => {
                let branches = dilations
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        (
                            self.conv(&format!("{name}.branch{i}"), cin, cout, 3, d),
                            self.norm(&format!("{name}.branch{i}.gn"), cout),
                        )
                    })
                    .collect::<Vec<_>>();
                let fuse = self.conv(
                    &format!("{name}.fuse"),
                    cout * dilations.len() + cin,
                    cout,
                    1,
                    1,
                );
                Block::Msdb(MsdbBlock {
                    branches,
                    fuse,
                    proj,
                })
            }
            BlockKind::Residual => Block::Residual(ResidualBlock {
                conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1),
                norm1: self.norm(&format!("{name}.gn1"), cout),
                conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
                norm2: self.norm(&format!("{name}.gn2"), cout),
                proj,
            }),
        }
    }

    fn attention(&mut self, name: &str, kind: AttentionKind, channels: usize, reduction: usize, spatial_k: usize) -> Attention {
        let hidden = (channels / reduction).max(1);
        match kind {
            AttentionKind::None => Attention::None,
            AttentionKind::Se => Attention::Se(SeBlock {
                fc1: self.conv(&format!("{name}.fc1"), channels, hidden, 1, 1),
                fc2: self.conv(&format!("{name}.fc2"), hidden, channels, 1, 1),
            }),
            AttentionKind::Ha => Attention::Ha(HaBlock {
                fc1: self.conv(&format!("{name}.fc1"), channels, hidden, 1, 1),
                fc2: self.conv(&format!("{name}.fc2"), hidden, channels, 1, 1),
                spatial: self.conv(&format!("{name}.spatial"), 2, 1, spatial_k, 1),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// the network
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ImsahloNet {
    pub config: NetworkConfig,
    store: ParamStore,
    encoder: Vec<Block>,
    bottleneck: Block,
    bottleneck_attn: Attention,
    skip_attn: Vec<Attention>,
    ups: Vec<UpLayer>,
    decoder: Vec<Block>,
    head: ConvLayer,
}

/// Per-forward mode: training enables spatial dropout driven by `rng`.
pub enum ForwardMode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng },
}

/// Graph handles for the bound parameters of one forward pass.
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl ImsahloNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut b = NetBuilder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            groups: config.groupnorm_groups,
        };
        let kind = config.block;
        let dil = config.msdb_dilations.clone();

        let mut encoder = Vec::new();
        let mut cin = 1;
        for stage in 0..config.depth {
            let cout = config.stage_channels(stage);
            encoder.push(b.block(&format!("enc{stage}"), kind, &dil, cin, cout));
            cin = cout;
        }
        let cbot = config.stage_channels(config.depth);
        let bottleneck = b.block("bottleneck", kind, &dil, cin, cbot);
        let bottleneck_attn = b.attention(
            "bottleneck.attn",
            config.attention,
            cbot,
            config.ha_channel_reduction,
            config.ha_spatial_kernel,
        );
        let mut skip_attn = Vec::new();
        for stage in 0..config.depth {
            skip_attn.push(b.attention(
                &format!("skip{stage}.attn"),
                config.attention,
                config.stage_channels(stage),
                config.ha_channel_reduction,
                config.ha_spatial_kernel,
            ));
        }
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for stage in (0..config.depth).rev() {
            let chi = config.stage_channels(stage + 1);
            let clo = config.stage_channels(stage);
            ups.push(UpLayer {
                conv: b.conv(&format!("dec{stage}.up"), chi, clo, 3, 1),
                norm: b.norm(&format!("dec{stage}.up.gn"), clo),
            });
            decoder.push(b.block(&format!("dec{stage}"), kind, &dil, 2 * clo, clo));
        }
        let mut head = b.conv("head", config.base_channels, 1, 1, 1);
        let prior = config.head_foreground_prior;
        b.store.entries_mut()[head.b].value.data_mut()[0] = (prior / (1.0 - prior)).ln();
        head.dilation = 1;

        Ok(Self {
            config,
            store: b.store,
            encoder,
            bottleneck,
            bottleneck_attn,
            skip_attn,
            ups,
            decoder,
            head,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Inserts every parameter into the graph. `trainable` controls whether
    /// gradients are tracked.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .store
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    g.leaf(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn conv(&self, g: &mut Graph, p: &BoundParams, layer: &ConvLayer, x: Var) -> Var {
        g.conv2d(x, p.vars[layer.w], p.vars[layer.b], layer.dilation)
    }

    fn norm(&self, g: &mut Graph, p: &BoundParams, layer: &NormLayer, x: Var) -> Var {
        g.groupnorm(x, p.vars[layer.gamma], p.vars[layer.beta], layer.groups, GN_EPS)
    }

    fn dropout(&self, g: &mut Graph, x: Var, mode: &mut ForwardMode) -> Var {
        let rate = self.config.spatial_dropout_rate;
        if rate == 0.0 {
            return x;
        }
        match mode {
            ForwardMode::Eval => x,
            ForwardMode::Train { rng } => {
                let t = g.value(x);
                let keep = 1.0 - rate;
                let factors: Vec<f64> = (0..t.n() * t.c())
                    .map(|_| {
                        if rng.random_bool(keep) {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                g.scale_channels(x, factors)
            }
        }
    }

    fn block_forward(&self, g: &mut Graph, p: &BoundParams, block: &Block, x: Var, mode: &mut ForwardMode) -> Var {
        let out = match block {
            Block::Msdb(msdb) => {
                let mut parts = Vec::with_capacity(msdb.branches.len() + 1);
                for (conv, norm) in &msdb.branches {
                    let y = self.conv(g, p, conv, x);
                    let y = self.norm(g, p, norm, y);
                    parts.push(g.swish(y));
                }
                parts.push(x);
                let cat = g.concat_channels(&parts);
                let fused = self.conv(g, p, &msdb.fuse, cat);
                let res = match &msdb.proj {
                    Some(proj) => self.conv(g, p, proj, x),
                    None => x,
                };
                g.add(fused, res)
            }
            Block::Residual(rb) => {
                let h = self.conv(g, p, &rb.conv1, x);
                let h = self.norm(g, p, &rb.norm1, h);
                let h = g.swish(h);
                let h = self.conv(g, p, &rb.conv2, h);
                let h = self.norm(g, p, &rb.norm2, h);
                let res = match &rb.proj {
                    Some(proj) => self.conv(g, p, proj, x),
                    None => x,
                };
                let sum = g.add(h, res);
                g.swish(sum)
            }
        };
        self.dropout(g, out, mode)
    }

    fn channel_mlp(&self, g: &mut Graph, p: &BoundParams, fc1: &ConvLayer, fc2: &ConvLayer, d: Var) -> Var {
        let h = self.conv(g, p, fc1, d);
        let h = g.swish(h);
        self.conv(g, p, fc2, h)
    }

    fn attention_forward(&self, g: &mut Graph, p: &BoundParams, attn: &Attention, x: Var) -> Var {
        match attn {
            Attention::None => x,
            Attention::Se(se) => {
                let d = g.global_avg_pool(x);
                let logits = self.channel_mlp(g, p, &se.fc1, &se.fc2, d);
                let s = g.sigmoid(logits);
                g.mul_channel(x, s)
            }
            Attention::Ha(ha) => {
                // channel stage: shared bottleneck over avg- and max-pooled
                // descriptors, summed before the sigmoid
                let avg = g.global_avg_pool(x);
                let mx = g.global_max_pool(x);
                let la = self.channel_mlp(g, p, &ha.fc1, &ha.fc2, avg);
                let lm = self.channel_mlp(g, p, &ha.fc1, &ha.fc2, mx);
                let logits = g.add(la, lm);
                let cw = g.sigmoid(logits);
                let xc = g.mul_channel(x, cw);
                // spatial stage: channel mean/max maps, k x k conv, sigmoid
                let mean_map = g.channel_mean(xc);
                let max_map = g.channel_max(xc);
                let cat = g.concat_channels(&[mean_map, max_map]);
                let sl = self.conv(g, p, &ha.spatial, cat);
                let sw = g.sigmoid(sl);
                g.mul_spatial(xc, sw)
            }
        }
    }

    /// Full forward pass: `input` is `(n, 1, h, w)` with `h`, `w` divisible
    /// by `2^depth`; output is a probability map of the same spatial size.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        input: Var,
        mut mode: ForwardMode,
    ) -> Result<Var, NetworkError> {
        let t = g.value(input);
        let (h, w) = (t.h(), t.w());
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(NetworkError::IndivisibleInput {
                h,
                w,
                depth: self.config.depth,
            });
        }

        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for block in &self.encoder {
            let e = self.block_forward(g, p, block, x, &mut mode);
            skips.push(e);
            x = g.maxpool2(e);
        }
        x = self.block_forward(g, p, &self.bottleneck, x, &mut mode);
        x = self.attention_forward(g, p, &self.bottleneck_attn, x);

        for (i, stage) in (0..self.config.depth).rev().enumerate() {
            let up = g.upsample2(x);
            let up = self.conv(g, p, &self.ups[i].conv, up);
            let up = self.norm(g, p, &self.ups[i].norm, up);
            let up = g.swish(up);
            let skip = self.attention_forward(g, p, &self.skip_attn[stage], skips[stage]);
            let cat = g.concat_channels(&[up, skip]);
            x = self.block_forward(g, p, &self.decoder[i], cat, &mut mode);
        }
        let logits = self.conv(g, p, &self.head, x);
        Ok(g.sigmoid(logits))
    }

    /// Convenience inference on a batch tensor (no gradients, eval mode).
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, NetworkError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &p, x, ForwardMode::Eval)?;
        Ok(g.value(out).clone())
    }

    // ---- checkpoints ----

    /// Writes `magic | version | header-json | raw f64 LE tensors`.
    /// The header records the config and every tensor's name and shape;
    /// `extra` carries trainer state for resumable checkpoints.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        extra: Option<serde_json::Value>,
    ) -> Result<(), NetworkError> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            params: self
                .store
                .entries
                .iter()
                .map(|e| (e.name.clone(), e.value.shape()))
                .collect(),
            extra,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| NetworkError::Corrupt(format!("header encode: {e}")))?;
        let io_err = |source| NetworkError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        let io_err = |source| NetworkError::Io {
            path: path.to_path_buf(),
            source,
        };
        f.write_all(b"IMSK").map_err(io_err)?;
        f.write_all(&1u32.to_le_bytes()).map_err(io_err)?;
        f.write_all(&(header_json.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        f.write_all(&header_json).map_err(io_err)?;
        for e in &self.store.entries {
            for v in e.value.data() {
                f.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        f.flush().map_err(io_err)?;
        Ok(())
    }

    /// Loads a checkpoint; the stored config must equal `expected_config`.
    /// Returns the network and any trainer state stored alongside.
    pub fn load_checkpoint(
        path: &Path,
        expected_config: &NetworkConfig,
    ) -> Result<(Self, Option<serde_json::Value>), NetworkError> {
        let (header, data) = read_checkpoint_raw(path)?;
        if &header.config != expected_config {
            return Err(NetworkError::ConfigMismatch);
        }
        // rebuild the architecture, then overwrite every tensor
        let mut net = ImsahloNet::new(header.config.clone(), 0)?;
        if net.store.entries.len() != header.params.len() {
            return Err(NetworkError::Corrupt("parameter list mismatch".into()));
        }
        let mut offset = 0usize;
        for (entry, (name, shape)) in net.store.entries.iter_mut().zip(&header.params) {
            if &entry.name != name || entry.value.shape() != *shape {
                return Err(NetworkError::Corrupt(format!(
                    "parameter '{}' does not match the stored layout",
                    entry.name
                )));
            }
            let len = entry.value.len();
            entry.value = Tensor::from_vec(*shape, data[offset..offset + len].to_vec());
            offset += len;
        }
        if offset != data.len() {
            return Err(NetworkError::Corrupt("trailing checkpoint data".into()));
        }
        Ok((net, header.extra))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetworkConfig,
    params: Vec<(String, [usize; 4])>,
    extra: Option<serde_json::Value>,
}

fn read_checkpoint_raw(path: &Path) -> Result<(CheckpointHeader, Vec<f64>), NetworkError> {
    let io_err = |source| NetworkError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io_err)?;
    if &magic != b"IMSK" {
        return Err(NetworkError::Corrupt("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf).map_err(io_err)?;
    if u32::from_le_bytes(u32buf) != 1 {
        return Err(NetworkError::Corrupt("unsupported version".into()));
    }
    f.read_exact(&mut u32buf).map_err(io_err)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json).map_err(io_err)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| NetworkError::Corrupt(format!("header decode: {e}")))?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest).map_err(io_err)?;
    if rest.len() % 8 != 0 {
        return Err(NetworkError::Corrupt("data not f64-aligned".into()));
    }
    let data = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}
