//! Parameterized layers. A layer owns only parameter names and sizes; the
//! values live in a [`ParamStore`] so one model description can be run in
//! several precisions or from a loaded checkpoint.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal position table `[n, d_model]`: even columns
/// `sin(pos / num^(i/d_model))`, odd columns `cos(pos / num^((i-1)/d_model))`.
pub fn sinusoidal_pe(n: usize, d_model: usize, num: f64) -> Result<Vec<f64>> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::Shape(format!("positional encoding width {d_model} must be even")));
    }
    let mut out = vec![0.0; n * d_model];
    for pos in 0..n {
        for i in 0..d_model {
            let v = if i % 2 == 0 {
                (pos as f64 / num.powf(i as f64 / d_model as f64)).sin()
            } else {
                (pos as f64 / num.powf((i - 1) as f64 / d_model as f64)).cos()
            };
            out[pos * d_model + i] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.register_uniform(&weight, &[fan_in, fan_out], fan_in, rng)?;
        store.register_uniform(&bias, &[fan_out], fan_in, rng)?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.linear(x, w, b)
    }
}

/// 3x3 convolution with unit stride and zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3x3 {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let fan_in = in_channels * 9;
        store.register_uniform(&weight, &[out_channels, in_channels, 3, 3], fan_in, rng)?;
        store.register_uniform(&bias, &[out_channels], fan_in, rng)?;
        Ok(Conv3x3 {
            weight,
            bias,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.conv2d(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub features: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, features: usize) -> Result<Self> {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.register(&gain, Tensor::full(&[features], T::one()))?;
        store.register(&bias, Tensor::zeros(&[features]))?;
        Ok(LayerNorm {
            gain,
            bias,
            features,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gain = g.param(&self.gain)?;
        let bias = g.param(&self.bias)?;
        g.layer_norm(x, gain, bias, T::of(LAYER_NORM_EPS))
    }
}

/// Single-head self-attention over atoms producing a sigmoid gate with the
/// input's shape.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub names: [String; 6],
    pub width: usize,
}

impl AttentionGate {
    /// `width` is the token size, channels × trailing axis.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let names = ["q", "k", "v"]
            .iter()
            .flat_map(|p| [format!("{name}.{p}.weight"), format!("{name}.{p}.bias")])
            .collect::<Vec<_>>();
        for (i, n) in names.iter().enumerate() {
            let shape: &[usize] = if i % 2 == 0 { &[width, width] } else { &[width] };
            store.register_uniform(n, shape, width, rng)?;
        }
        Ok(AttentionGate {
            names: names.try_into().expect("six names"),
            width,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, sizes: &[usize]) -> Result<Var> {
        let mut w = Vec::with_capacity(6);
        for n in &self.names {
            w.push(g.param(n)?);
        }
        g.self_attention(x, w.try_into().expect("six vars"), sizes)
    }
}

/// Densely connected block: `concat(x, relu(conv(x)))`, padded atoms kept
/// at zero.
#[derive(Debug, Clone)]
pub struct DenseCrossBlock {
    pub conv: Option<Conv3x3>,
    pub in_channels: usize,
    pub growth: usize,
}

impl DenseCrossBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        growth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = if growth > 0 {
            Some(Conv3x3::new(store, &format!("{name}.conv"), in_channels, growth, rng)?)
        } else {
            None
        };
        Ok(DenseCrossBlock {
            conv,
            in_channels,
            growth,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.growth
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, sizes: &[usize]) -> Result<Var> {
        let Some(conv) = &self.conv else {
            return Ok(x);
        };
        let h = conv.forward(g, x)?;
        let h = g.relu(h);
        let h = g.atom_mask(h, sizes)?;
        g.concat(&[x, h], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_first_row_alternates_zero_one() {
        let pe = sinusoidal_pe(3, 8, 10000.0).unwrap();
        for i in 0..8 {
            assert_eq!(pe[i], if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe[8] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[8] - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn pe_bounded() {
        let pe = sinusoidal_pe(40, 64, 10000.0).unwrap();
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pe_rejects_odd_width() {
        assert!(sinusoidal_pe(4, 7, 10000.0).is_err());
    }
}
