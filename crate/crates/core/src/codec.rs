//! Watermark encoder and decoder built from the runtime layers.
//!
//! The encoder turns positions, node features and a bit string into an
//! additive position mask. The decoder never sees raw coordinates: it
//! reads the canonical MDS recovery of the distance matrix, which makes the
//! extracted bits independent of rotation, translation and reflection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry;
use crate::molecule::{EdgeSet, Molecule, MoleculeBatch};
use crate::runtime::{
    sinusoidal_pe, AttentionGate, Conv3x3, DenseCrossBlock, Graph, LayerNorm, Linear, ParamStore, Real, Tensor, Var,
};

pub const MAX_CAPACITY: usize = 32;

/// Binary payload of 1 to 32 bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Watermark {
    bits: Vec<u8>,
}

impl Watermark {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() || bits.len() > MAX_CAPACITY {
            return Err(Error::Watermark(format!(
                "length {} outside 1..={MAX_CAPACITY}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Watermark("bits must be 0 or 1".into()));
        }
        Ok(Watermark { bits })
    }

    pub fn random<R: Rng>(len: usize, rng: &mut R) -> Result<Self> {
        Watermark::new((0..len).map(|_| rng.random_range(0..=1u8)).collect())
    }

    /// Accepts `0101…` (optionally `0b`-prefixed) or `0x<hex>:<L>`, where
    /// the low `L` bits of the hex value are taken most significant first.
    pub fn parse(text: &str) -> Result<Self> {
        let s = text.trim();
        if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            let (digits, len) = hex
                .split_once(':')
                .ok_or_else(|| Error::Watermark("hex form needs an explicit length, e.g. 0xA5:8".into()))?;
            let len: usize = len
                .parse()
                .map_err(|_| Error::Watermark(format!("bad length {len:?}")))?;
            let value = u64::from_str_radix(digits, 16).map_err(|_| Error::Watermark(format!("bad hex {digits:?}")))?;
            if len == 0 || len > MAX_CAPACITY || (len < 64 && value >> len != 0) {
                return Err(Error::Watermark(format!("0x{digits} does not fit in {len} bits")));
            }
            return Watermark::new((0..len).rev().map(|i| ((value >> i) & 1) as u8).collect());
        }
        let body = s.strip_prefix("0b").unwrap_or(s);
        let bits = body
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(Error::Watermark(format!("invalid bit {c:?} in {text:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Watermark::new(bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_hex(&self) -> String {
        let v = self.bits.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64);
        format!("0x{v:X}:{}", self.len())
    }
}

impl fmt::Display for Watermark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for Watermark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Watermark::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Aggregation {
    Sum,
    Mean,
}

/// The original model and the three embedder ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Original,
    /// Atom embedder removed.
    Variant1,
    /// Edge embedder removed.
    Variant2,
    /// Both removed.
    Variant3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Original, Variant::Variant1, Variant::Variant2, Variant::Variant3];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Original => (true, true),
            Variant::Variant1 => (false, true),
            Variant::Variant2 => (true, false),
            Variant::Variant3 => (false, false),
        }
    }

    pub fn from_flags(atom: bool, edge: bool) -> Self {
        match (atom, edge) {
            (true, true) => Variant::Original,
            (false, true) => Variant::Variant1,
            (true, false) => Variant::Variant2,
            (false, false) => Variant::Variant3,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Watermark length L.
    pub capacity: usize,
    /// Position feature channels C.
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_channels")]
    pub d_model: usize,
    #[serde(default = "default_growth")]
    pub growth: usize,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default = "yes")]
    pub use_atom_embedder: bool,
    #[serde(default = "yes")]
    pub use_edge_embedder: bool,
    /// Atom type vocabulary size e.
    #[serde(default = "default_types")]
    pub n_types: usize,
    #[serde(default = "default_pe_base")]
    pub pe_base: f64,
}

fn default_channels() -> usize {
    64
}
fn default_growth() -> usize {
    16
}
fn default_aggregation() -> Aggregation {
    Aggregation::Sum
}
fn yes() -> bool {
    true
}
fn default_types() -> usize {
    5
}
fn default_pe_base() -> f64 {
    10000.0
}

impl CodecConfig {
    pub fn new(capacity: usize) -> Self {
        CodecConfig {
            capacity,
            channels: default_channels(),
            d_model: default_channels(),
            growth: default_growth(),
            aggregation: Aggregation::Sum,
            use_atom_embedder: true,
            use_edge_embedder: true,
            n_types: default_types(),
            pe_base: default_pe_base(),
        }
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.use_atom_embedder, self.use_edge_embedder)
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        let (a, e) = v.flags();
        self.use_atom_embedder = a;
        self.use_edge_embedder = e;
        self
    }

    fn embedder_channels(&self) -> usize {
        self.use_atom_embedder as usize + self.use_edge_embedder as usize
    }

    /// Channels entering the encoder's cross blocks: C + embedders + L.
    pub fn encoder_channels(&self) -> usize {
        self.channels + self.embedder_channels() + self.capacity
    }

    /// Channels entering the decoder's cross blocks: C + embedders.
    pub fn decoder_channels(&self) -> usize {
        self.channels + self.embedder_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 || self.capacity > MAX_CAPACITY {
            return Err(Error::Config(format!("capacity {} outside 1..={MAX_CAPACITY}", self.capacity)));
        }
        if self.channels == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(2) || self.n_types == 0 {
            return Err(Error::Config("channels, d_model (even) and n_types must be positive".into()));
        }
        Ok(())
    }
}

/// Two 3x3 convolutions lifting `[B,1,N,3]` positions to `[B,C,N,3]`.
#[derive(Debug, Clone)]
pub struct PositionModule {
    conv1: Conv3x3,
    conv2: Conv3x3,
}

impl PositionModule {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        Ok(PositionModule {
            conv1: Conv3x3::new(store, &format!("{name}.conv1"), 1, c, rng)?,
            conv2: Conv3x3::new(store, &format!("{name}.conv2"), c, c, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Var, sizes: &[usize]) -> Result<Var> {
        let h = self.conv1.forward(g, p)?;
        let h = g.relu(h);
        let h = g.atom_mask(h, sizes)?;
        let h = self.conv2.forward(g, h)?;
        g.atom_mask(h, sizes)
    }
}

/// Atom type and charge features → `[B,1,N,3]`.
#[derive(Debug, Clone)]
pub struct AtomEmbedder {
    type_proj: Linear,
    out: Linear,
}

impl AtomEmbedder {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &CodecConfig, rng: &mut R) -> Result<Self> {
        Ok(AtomEmbedder {
            type_proj: Linear::new(store, &format!("{name}.type_proj"), cfg.n_types, cfg.d_model, rng)?,
            out: Linear::new(store, &format!("{name}.out"), 2 * cfg.d_model, 3, rng)?,
        })
    }

    /// `types` is `[B,1,N,e]`; `charge_pe` is the precomputed `PE ∘ c`,
    /// `[B,1,N,d_model]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, types: Var, charge_pe: Var, sizes: &[usize]) -> Result<Var> {
        let t = self.type_proj.forward(g, types)?;
        let t = g.relu(t);
        let h = g.concat(&[charge_pe, t], 3)?;
        let h = self.out.forward(g, h)?;
        g.atom_mask(h, sizes)
    }
}

/// Distance-aware features → `[B,1,N,3]`.
#[derive(Debug, Clone)]
pub struct EdgeEmbedder {
    aggregate: Linear,
    hidden: Linear,
    norm: LayerNorm,
    out: Linear,
    mean: bool,
    with_atoms: bool,
}

impl EdgeEmbedder {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &CodecConfig, rng: &mut R) -> Result<Self> {
        let with_atoms = cfg.use_atom_embedder;
        let fan_in = if with_atoms { 4 } else { 1 };
        Ok(EdgeEmbedder {
            aggregate: Linear::new(store, &format!("{name}.aggregate"), fan_in, 3, rng)?,
            hidden: Linear::new(store, &format!("{name}.hidden"), 3 + cfg.d_model, cfg.d_model, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model)?,
            out: Linear::new(store, &format!("{name}.out"), cfg.d_model, 3, rng)?,
            mean: cfg.aggregation == Aggregation::Mean,
            with_atoms,
        })
    }

    /// `atoms` is the atom embedder output when that embedder is enabled.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        atoms: Option<Var>,
        p: Var,
        pe: Var,
        sizes: &[usize],
    ) -> Result<Var> {
        let a_d = g.distance_aggregate(p, sizes, self.mean)?;
        let h = match (self.with_atoms, atoms) {
            (true, Some(f_a)) => g.concat(&[f_a, a_d], 3)?,
            (false, _) => a_d,
            (true, None) => return Err(Error::Shape("edge embedder expects atom features".into())),
        };
        let h = self.aggregate.forward(g, h)?;
        let h = g.relu(h);
        let h = g.concat(&[h, pe], 3)?;
        let h = self.hidden.forward(g, h)?;
        let h = self.norm.forward(g, h)?;
        let h = g.relu(h);
        let h = self.out.forward(g, h)?;
        g.atom_mask(h, sizes)
    }
}

#[derive(Debug, Clone)]
struct FeatureStack {
    position: PositionModule,
    atom: Option<AtomEmbedder>,
    edge: Option<EdgeEmbedder>,
}

impl FeatureStack {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &CodecConfig, rng: &mut R) -> Result<Self> {
        Ok(FeatureStack {
            position: PositionModule::new(store, &format!("{name}.position"), cfg.channels, rng)?,
            atom: if cfg.use_atom_embedder {
                Some(AtomEmbedder::new(store, &format!("{name}.atom"), cfg, rng)?)
            } else {
                None
            },
            edge: if cfg.use_edge_embedder {
                Some(EdgeEmbedder::new(store, &format!("{name}.edge"), cfg, rng)?)
            } else {
                None
            },
        })
    }

    /// `[f_p, f_a?, f_e?]` as separate channel groups.
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: Var, inp: &NodeInputs) -> Result<Vec<Var>> {
        let mut parts = vec![self.position.forward(g, p, &inp.sizes)?];
        let f_a = match &self.atom {
            Some(a) => Some(a.forward(g, inp.types, inp.charge_pe, &inp.sizes)?),
            None => None,
        };
        if let Some(f_a) = f_a {
            parts.push(f_a);
        }
        if let Some(e) = &self.edge {
            parts.push(e.forward(g, f_a, p, inp.pe, &inp.sizes)?);
        }
        Ok(parts)
    }
}

fn cross_blocks<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    mut channels: usize,
    growth: usize,
    rng: &mut R,
) -> Result<Vec<DenseCrossBlock>> {
    (0..3)
        .map(|i| {
            let b = DenseCrossBlock::new(store, &format!("{name}.cross{i}"), channels, growth, rng)?;
            channels = b.out_channels();
            Ok(b)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Encoder {
    features: FeatureStack,
    blocks: Vec<DenseCrossBlock>,
    attention: AttentionGate,
    out: Conv3x3,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    features: FeatureStack,
    blocks: Vec<DenseCrossBlock>,
    out: Conv3x3,
}

/// Encoder and decoder layer layout for one [`CodecConfig`].
#[derive(Debug, Clone)]
pub struct WatermarkModel {
    pub config: CodecConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Graph nodes for the per-atom inputs shared by encoder and decoder.
#[derive(Debug, Clone)]
pub struct NodeInputs {
    pub types: Var,
    pub charge_pe: Var,
    pub pe: Var,
    pub sizes: Vec<usize>,
}

impl NodeInputs {
    pub fn new<T: Real>(g: &mut Graph<T>, batch: &MoleculeBatch, cfg: &CodecConfig) -> Result<Self> {
        if batch.n_types != cfg.n_types {
            return Err(Error::Shape(format!(
                "batch has {} atom types, model expects {}",
                batch.n_types, cfg.n_types
            )));
        }
        let (b, n, dm) = (batch.len(), batch.n_max, cfg.d_model);
        let table = sinusoidal_pe(n, dm, cfg.pe_base)?;
        let mut pe = vec![0.0; b * n * dm];
        let mut cpe = vec![0.0; b * n * dm];
        for bi in 0..b {
            for i in 0..batch.sizes[bi] {
                let c = batch.charges[bi * n + i];
                for k in 0..dm {
                    let v = table[i * dm + k];
                    pe[(bi * n + i) * dm + k] = v;
                    cpe[(bi * n + i) * dm + k] = v * c;
                }
            }
        }
        Ok(NodeInputs {
            types: g.input(batch.atom_types_tensor()),
            charge_pe: g.input(Tensor::from_f64(&[b, 1, n, dm], &cpe)?),
            pe: g.input(Tensor::from_f64(&[b, 1, n, dm], &pe)?),
            sizes: batch.sizes.clone(),
        })
    }
}

/// `m^e[b, l, n, c] = bits[b][l]`.
pub fn expand_watermark<T: Real>(marks: &[&Watermark], n: usize) -> Result<Tensor<T>> {
    let l = marks.first().map(|m| m.len()).unwrap_or(0);
    if marks.iter().any(|m| m.len() != l) {
        return Err(Error::Watermark("watermarks in one batch must share a length".into()));
    }
    let mut data = Vec::with_capacity(marks.len() * l * n * 3);
    for m in marks {
        for &bit in m.bits() {
            data.extend(std::iter::repeat_n(T::of(bit as f64), n * 3));
        }
    }
    Tensor::from_vec(&[marks.len(), l, n, 3], data)
}

/// Per-atom sum or mean of distances over a neighbor set.
pub fn aggregate_distance(edges: &EdgeSet, positions: &[[f64; 3]], mode: Aggregation) -> Vec<f64> {
    (0..edges.n())
        .map(|i| {
            let nb = edges.neighbors(i);
            let s: f64 = nb
                .iter()
                .map(|&j| {
                    let (a, b) = (positions[i], positions[j]);
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
                .sum();
            match mode {
                Aggregation::Sum => s,
                Aggregation::Mean if !nb.is_empty() => s / nb.len() as f64,
                Aggregation::Mean => 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutputs {
    pub p_prime: Var,
    pub p_mask: Var,
}

impl WatermarkModel {
    /// Registers freshly initialized parameters for `cfg` in a new store.
    pub fn build<T: Real, R: Rng>(cfg: &CodecConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let enc_features = FeatureStack::new(&mut store, "encoder", cfg, rng)?;
        let enc_blocks = cross_blocks(&mut store, "encoder", cfg.encoder_channels(), cfg.growth, rng)?;
        let enc_width = cfg.encoder_channels() + 3 * cfg.growth;
        let attention = AttentionGate::new(&mut store, "encoder.attention", enc_width * 3, rng)?;
        let enc_out = Conv3x3::new(&mut store, "encoder.out", enc_width, 1, rng)?;
        let dec_features = FeatureStack::new(&mut store, "decoder", cfg, rng)?;
        let dec_blocks = cross_blocks(&mut store, "decoder", cfg.decoder_channels(), cfg.growth, rng)?;
        let dec_width = cfg.decoder_channels() + 3 * cfg.growth;
        let dec_out = Conv3x3::new(&mut store, "decoder.out", dec_width, cfg.capacity, rng)?;
        Ok((
            WatermarkModel {
                config: cfg.clone(),
                encoder: Encoder {
                    features: enc_features,
                    blocks: enc_blocks,
                    attention,
                    out: enc_out,
                },
                decoder: Decoder {
                    features: dec_features,
                    blocks: dec_blocks,
                    out: dec_out,
                },
            },
            store,
        ))
    }

    /// Position features `f_p`, `[B,C,N,3]`.
    pub fn position_features<T: Real>(&self, g: &mut Graph<T>, p: Var, sizes: &[usize]) -> Result<Var> {
        self.encoder.features.position.forward(g, p, sizes)
    }

    /// Encoder atom features `f_a`, `[B,1,N,3]`.
    pub fn atom_features<T: Real>(&self, g: &mut Graph<T>, inp: &NodeInputs) -> Result<Option<Var>> {
        match &self.encoder.features.atom {
            Some(a) => Ok(Some(a.forward(g, inp.types, inp.charge_pe, &inp.sizes)?)),
            None => Ok(None),
        }
    }

    /// Encoder edge features `f_e`, `[B,1,N,3]`.
    pub fn edge_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        f_a: Option<Var>,
        p: Var,
        inp: &NodeInputs,
    ) -> Result<Option<Var>> {
        match &self.encoder.features.edge {
            Some(e) => Ok(Some(e.forward(g, f_a, p, inp.pe, &inp.sizes)?)),
            None => Ok(None),
        }
    }

    /// `p' = p + p_m`; padded atoms receive no mask.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: Var,
        inp: &NodeInputs,
        marks: &[&Watermark],
    ) -> Result<EncoderOutputs> {
        let cfg = &self.config;
        if marks.len() != inp.sizes.len() {
            return Err(Error::Shape(format!("{} watermarks for {} molecules", marks.len(), inp.sizes.len())));
        }
        if let Some(m) = marks.iter().find(|m| m.len() != cfg.capacity) {
            return Err(Error::Watermark(format!(
                "watermark length {} does not match model capacity {}",
                m.len(),
                cfg.capacity
            )));
        }
        let n = g.value(p).dim(2);
        let me = expand_watermark(marks, n)?;
        let me = g.input(me);
        let me = g.atom_mask(me, &inp.sizes)?;
        let mut parts = self.encoder.features.forward(g, p, inp)?;
        parts.push(me);
        let mut x = g.concat(&parts, 1)?;
        for b in &self.encoder.blocks {
            x = b.forward(g, x, &inp.sizes)?;
        }
        let gate = self.encoder.attention.forward(g, x, &inp.sizes)?;
        let gated = g.mul(x, gate)?;
        let p_mask = self.encoder.out.forward(g, gated)?;
        let p_mask = g.atom_mask(p_mask, &inp.sizes)?;
        let p_prime = g.add(p, p_mask)?;
        Ok(EncoderOutputs { p_prime, p_mask })
    }

    /// Continuous bit estimates in (0, 1), `[B,L,1,1]`, from recovered
    /// (canonical) positions.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p_hat: Var, inp: &NodeInputs) -> Result<Var> {
        let parts = self.decoder.features.forward(g, p_hat, inp)?;
        let mut x = g.concat(&parts, 1)?;
        for b in &self.decoder.blocks {
            x = b.forward(g, x, &inp.sizes)?;
        }
        let logits = self.decoder.out.forward(g, x)?;
        let pooled = g.masked_mean_pool(logits, &inp.sizes)?;
        Ok(g.sigmoid(pooled))
    }

    /// Embeds one watermark per molecule; node features are untouched.
    pub fn embed_batch<T: Real>(
        &self,
        params: &ParamStore<T>,
        mols: &[Molecule],
        marks: &[&Watermark],
    ) -> Result<Vec<Molecule>> {
        let batch = MoleculeBatch::from_molecules(&mols.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new(params);
        let inp = NodeInputs::new(&mut g, &batch, &self.config)?;
        let p = g.input(batch.positions_tensor());
        let out = self.encode(&mut g, p, &inp, marks)?;
        let moved = g.value(out.p_prime).to_f64_vec();
        let mut result = batch.unbatch(Some(&moved));
        for (new, old) in result.iter_mut().zip(mols) {
            // keep node features bit-identical to the input
            new.type_index = old.type_index.clone();
            new.charges = old.charges.clone();
            new.element_symbols = old.element_symbols.clone();
            new.validate()?;
        }
        Ok(result)
    }

    pub fn embed<T: Real>(&self, params: &ParamStore<T>, mol: &Molecule, mark: &Watermark) -> Result<Molecule> {
        Ok(self.embed_batch(params, std::slice::from_ref(mol), &[mark])?.remove(0))
    }

    /// Continuous decoder outputs for each molecule, after distance matrix →
    /// MDS → canonical pose.
    pub fn extract_soft_batch<T: Real>(&self, params: &ParamStore<T>, mols: &[Molecule]) -> Result<Vec<Vec<f64>>> {
        let mut recovered = Vec::with_capacity(mols.len());
        for m in mols {
            let canon = geometry::recover_canonical(&m.positions)?;
            recovered.push(m.with_positions(canon)?);
        }
        let batch = MoleculeBatch::from_molecules(&recovered.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new(params);
        let inp = NodeInputs::new(&mut g, &batch, &self.config)?;
        let p_hat = g.input(batch.positions_tensor());
        let soft = self.decode(&mut g, p_hat, &inp)?;
        let l = self.config.capacity;
        Ok(g.value(soft).to_f64_vec().chunks(l).map(<[f64]>::to_vec).collect())
    }

    pub fn extract_batch<T: Real>(&self, params: &ParamStore<T>, mols: &[Molecule]) -> Result<Vec<Watermark>> {
        self.extract_soft_batch(params, mols)?
            .into_iter()
            .map(|soft| Watermark::new(threshold_bits(&soft)))
            .collect()
    }

    pub fn extract<T: Real>(&self, params: &ParamStore<T>, mol: &Molecule) -> Result<Watermark> {
        Ok(self.extract_batch(params, std::slice::from_ref(mol))?.remove(0))
    }
}

/// Hard decision at 0.5.
pub fn threshold_bits(soft: &[f64]) -> Vec<u8> {
    soft.iter().map(|&v| (v >= 0.5) as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn watermark_text_forms() {
        let w: Watermark = "0101".parse().unwrap();
        assert_eq!(w.bits(), [0, 1, 0, 1]);
        assert_eq!(w.to_string(), "0101");
        let h = Watermark::parse("0xA5:8").unwrap();
        assert_eq!(h.to_string(), "10100101");
        assert_eq!(h.to_hex(), "0xA5:8");
        assert_eq!(Watermark::parse("0x5:4").unwrap().to_string(), "0101");
        assert!(Watermark::parse("0x1F:4").is_err());
        assert!(Watermark::parse("0xA5").is_err());
        assert!(Watermark::parse("01a1").is_err());
        assert!(Watermark::parse("").is_err());
        assert!(Watermark::new(vec![1; 33]).is_err());
    }

    #[test]
    fn expanded_watermark_replicates_bits() {
        let m = Watermark::parse("10").unwrap();
        let t: Tensor<f64> = expand_watermark(&[&m, &m, &m], 2).unwrap();
        assert_eq!(t.shape(), [3, 2, 2, 3]);
        for b in 0..3 {
            let base = b * 12;
            assert!(t.data()[base..base + 6].iter().all(|&v| v == 1.0));
            assert!(t.data()[base + 6..base + 12].iter().all(|&v| v == 0.0));
        }
        let z = Watermark::parse("0000").unwrap();
        let t: Tensor<f64> = expand_watermark(&[&z], 5).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregation_modes() {
        let two = [[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]];
        assert_eq!(aggregate_distance(&EdgeSet::complete(2), &two, Aggregation::Sum), [5.0, 5.0]);
        let line = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(aggregate_distance(&EdgeSet::complete(3), &line, Aggregation::Mean), [1.5, 1.0, 1.5]);
        let sum = aggregate_distance(&EdgeSet::complete(3), &line, Aggregation::Sum);
        assert_eq!(sum, [3.0, 2.0, 3.0]);
    }

    #[test]
    fn variant_channel_counts() {
        let base = CodecConfig::new(4);
        assert_eq!(base.encoder_channels(), 64 + 2 + 4);
        assert_eq!(base.clone().with_variant(Variant::Variant1).encoder_channels(), 64 + 1 + 4);
        assert_eq!(base.clone().with_variant(Variant::Variant2).encoder_channels(), 64 + 1 + 4);
        assert_eq!(base.clone().with_variant(Variant::Variant3).encoder_channels(), 64 + 4);
        for v in Variant::ALL {
            assert_eq!(base.clone().with_variant(v).variant(), v);
        }
    }

    #[test]
    fn threshold() {
        assert_eq!(threshold_bits(&[0.73, 0.21, 0.5]), [1, 0, 1]);
    }
}
