//! Multi-frequency channel attention built on 2D DCT-II basis planes.
//!
//! Channels are split into `n` contiguous groups. Group `i` is pooled
//! against one cosine plane `B^i`, giving one scalar per channel; the
//! concatenated vector passes through a single fully connected layer and a
//! sigmoid to give per-channel weights that rescale the feature map.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt::Write as _;

use crate::error::{check_dim, invalid, Result};
use crate::graph::Var;
use crate::kernels::{self, sigmoid};
use crate::params::{LinearParams, ParamBuilder, Session};
use crate::tensor::Tensor;

pub type Frequency = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    pub h: usize,
    pub w: usize,
    pub freqs: Vec<Frequency>,
    pub orthonormal: bool,
    planes: Arc<Vec<Vec<f64>>>,
}

impl DctBasis {
    pub fn plane(&self, i: usize) -> &[f64] {
        &self.planes[i]
    }

    pub fn planes(&self) -> &Arc<Vec<Vec<f64>>> {
        &self.planes
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

fn build(h: usize, w: usize, freqs: &[Frequency], orthonormal: bool) -> Result<DctBasis> {
    const OP: &str = "build_dct_basis";
    if h == 0 || w == 0 {
        return Err(invalid(OP, "basis extents must be positive"));
    }
    for (i, &(u, v)) in freqs.iter().enumerate() {
        if u >= h || v >= w {
            return Err(invalid(
                OP,
                alloc::format!("frequency ({u},{v}) outside {h}x{w} grid"),
            ));
        }
        if freqs[..i].contains(&(u, v)) {
            return Err(invalid(OP, alloc::format!("duplicate frequency ({u},{v})")));
        }
    }
    let alpha = |k: usize, n: usize| -> f64 {
        if !orthonormal {
            1.0
        } else if k == 0 {
            libm::sqrt(1.0 / n as f64)
        } else {
            libm::sqrt(2.0 / n as f64)
        }
    };
    let planes = freqs
        .iter()
        .map(|&(u, v)| {
            let (au, av) = (alpha(u, h), alpha(v, w));
            let col: Vec<f64> = (0..w)
                .map(|x| av * libm::cos(PI * v as f64 * (x as f64 + 0.5) / w as f64))
                .collect();
            let mut plane = Vec::with_capacity(h * w);
            for y in 0..h {
                let r = au * libm::cos(PI * u as f64 * (y as f64 + 0.5) / h as f64);
                plane.extend(col.iter().map(|c| r * c));
            }
            plane
        })
        .collect();
    Ok(DctBasis {
        h,
        w,
        freqs: freqs.to_vec(),
        orthonormal,
        planes: Arc::new(planes),
    })
}

/// Unnormalized planes `cos(pi u (h + 1/2) / H) cos(pi v (w + 1/2) / W)`.
pub fn build_dct_basis(h: usize, w: usize, freqs: &[Frequency]) -> Result<DctBasis> {
    build(h, w, freqs, false)
}

/// Orthonormally scaled planes, used to verify the basis.
pub fn build_orthonormal_dct_basis(h: usize, w: usize, freqs: &[Frequency]) -> Result<DctBasis> {
    build(h, w, freqs, true)
}

/// Every `(u, v)` of an `h x w` grid.
pub fn full_grid(h: usize, w: usize) -> Vec<Frequency> {
    (0..h).flat_map(|u| (0..w).map(move |v| (u, v))).collect()
}

/// The `n` lowest frequencies of an `h x w` grid ordered by `u + v`, then `u`.
pub fn lowest_frequencies(h: usize, w: usize, n: usize) -> Vec<Frequency> {
    let mut all = full_grid(h, w);
    all.sort_by_key(|&(u, v)| (u + v, u));
    all.truncate(n);
    all
}

pub const DEFAULT_POOL_SIZE: usize = 7;
pub const DEFAULT_GROUPS: usize = 16;

pub fn default_frequencies() -> Vec<Frequency> {
    lowest_frequencies(DEFAULT_POOL_SIZE, DEFAULT_POOL_SIZE, DEFAULT_GROUPS)
}

/// Parses whitespace-separated `u,v` pairs.
pub fn parse_frequency_list(s: &str) -> Result<Vec<Frequency>> {
    const OP: &str = "parse_frequency_list";
    let list: Vec<Frequency> = s
        .split_whitespace()
        .map(|tok| {
            let (u, v) = tok
                .split_once(',')
                .ok_or_else(|| invalid(OP, alloc::format!("expected u,v pair, got {tok:?}")))?;
            let parse = |p: &str| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| invalid(OP, alloc::format!("bad index in {tok:?}")))
            };
            Ok((parse(u)?, parse(v)?))
        })
        .collect::<Result<_>>()?;
    if list.is_empty() {
        return Err(invalid(OP, "empty frequency list"));
    }
    Ok(list)
}

pub fn format_frequency_list(freqs: &[Frequency]) -> String {
    let mut s = String::new();
    for (i, (u, v)) in freqs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{u},{v}");
    }
    s
}

/// Contiguous equal-size channel groups; channel `c` belongs to group
/// `c / (channels / n)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyGroups {
    pub n: usize,
    pub channels: usize,
    assign: Arc<Vec<usize>>,
}

impl FrequencyGroups {
    pub fn new(channels: usize, n: usize) -> Result<Self> {
        if n == 0 || channels == 0 || !channels.is_multiple_of(n) {
            return Err(invalid(
                "frequency_groups",
                alloc::format!("{n} groups do not partition {channels} channels"),
            ));
        }
        let size = channels / n;
        Ok(Self {
            n,
            channels,
            assign: Arc::new((0..channels).map(|c| c / size).collect()),
        })
    }

    pub fn group_of(&self, c: usize) -> usize {
        self.assign[c]
    }

    pub fn assignment(&self) -> &Arc<Vec<usize>> {
        &self.assign
    }
}

fn check_pool_inputs(x: &Tensor, basis: &DctBasis, groups: &FrequencyGroups) -> Result<()> {
    const OP: &str = "multi_frequency_pool";
    let (c, h, w) = x.dims3(OP)?;
    check_dim(OP, "basis height", basis.h, h)?;
    check_dim(OP, "basis width", basis.w, w)?;
    check_dim(OP, "group channel count", groups.channels, c)?;
    check_dim(OP, "frequency count (one per group)", groups.n, basis.len())?;
    Ok(())
}

/// One frequency component per channel, concatenated in channel order.
pub fn multi_frequency_pool(x: &Tensor, basis: &DctBasis, groups: &FrequencyGroups) -> Result<Tensor> {
    check_pool_inputs(x, basis, groups)?;
    let mf = (0..groups.channels)
        .map(|c| {
            x.plane(c)
                .iter()
                .zip(basis.plane(groups.group_of(c)))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Tensor::new(&[groups.channels], mf)
}

/// `sigmoid(fc_w * mf + fc_b)`.
pub fn attention_weights(mf: &Tensor, fc_w: &Tensor, fc_b: &Tensor) -> Result<Tensor> {
    Ok(kernels::linear_forward(mf, fc_w, fc_b)?.map(sigmoid))
}

pub fn apply_channel_attention(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3("apply_channel_attention")?;
    check_dim("apply_channel_attention", "weight length", c, weights.len())?;
    let mut y = x.clone();
    for (ch, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
        for v in plane {
            *v *= weights.data()[ch];
        }
    }
    Ok(y)
}

/// Tape version of [`multi_frequency_pool`].
pub fn multi_frequency_pool_graph(
    sess: &mut Session,
    x: Var,
    basis: &DctBasis,
    groups: &FrequencyGroups,
) -> Result<Var> {
    check_pool_inputs(sess.graph.value(x), basis, groups)?;
    sess.graph
        .plane_pool(x, basis.planes().clone(), groups.assignment().clone())
}

/// How the attention block treats its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Multiplies by a constant all-ones weight vector.
    UnitWeights,
    /// Skips the block entirely.
    Bypass,
}

/// Multi-frequency attention block with its FC layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiFrequencyAttention {
    pub basis: DctBasis,
    pub groups: FrequencyGroups,
    pub fc: LinearParams,
}

impl MultiFrequencyAttention {
    pub fn new(
        builder: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        pool_size: usize,
        freqs: &[Frequency],
    ) -> Result<Self> {
        let basis = build_dct_basis(pool_size, pool_size, freqs)?;
        let groups = FrequencyGroups::new(channels, freqs.len())?;
        let fc = builder.linear(&alloc::format!("{name}.fc"), channels, channels);
        Ok(Self { basis, groups, fc })
    }

    /// Attention weights for `x`; the pooling input is resized to the basis
    /// extents first.
    pub fn weights(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let (_, h, w) = sess.graph.value(x).dims3("multi_frequency_attention")?;
        let pooled_in = if (h, w) == (self.basis.h, self.basis.w) {
            x
        } else {
            sess.graph.resize(x, self.basis.h, self.basis.w)?
        };
        let mf = multi_frequency_pool_graph(sess, pooled_in, &self.basis, &self.groups)?;
        let z = sess.linear(&self.fc, mf)?;
        Ok(sess.graph.sigmoid(z))
    }

    pub fn forward(&self, sess: &mut Session, x: Var, mode: AttentionMode) -> Result<Var> {
        match mode {
            AttentionMode::Bypass => Ok(x),
            AttentionMode::UnitWeights => {
                let c = sess.graph.value(x).shape()[0];
                let ones = sess.graph.constant(Tensor::ones(&[c]));
                sess.graph.scale_channels(x, ones)
            }
            AttentionMode::Learned => {
                let a = self.weights(sess, x)?;
                sess.graph.scale_channels(x, a)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_plane_is_all_ones() {
        let b = build_dct_basis(4, 4, &[(0, 0)]).unwrap();
        assert!(b.plane(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn first_vertical_frequency_on_two_rows() {
        let b = build_dct_basis(2, 1, &[(1, 0)]).unwrap();
        let expect = [libm::cos(PI / 4.0), libm::cos(3.0 * PI / 4.0)];
        for (a, e) in b.plane(0).iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((b.plane(0)[0] - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_indices() {
        assert!(build_dct_basis(4, 4, &[(4, 0)]).is_err());
        assert!(build_dct_basis(4, 4, &[(1, 1), (1, 1)]).is_err());
    }

    #[test]
    fn default_frequency_order() {
        let f = default_frequencies();
        assert_eq!(f.len(), 16);
        assert_eq!(&f[..6], &[(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0)]);
        assert!(f[..15].iter().all(|&(u, v)| u + v <= 4));
        assert_eq!(f[15], (0, 5));
    }

    #[test]
    fn frequency_list_round_trip() {
        let f = parse_frequency_list(" 0,0\t1,2  3,4 ").unwrap();
        assert_eq!(f, [(0, 0), (1, 2), (3, 4)]);
        assert_eq!(format_frequency_list(&f), "0,0 1,2 3,4");
        assert!(parse_frequency_list("1;2").is_err());
        assert!(parse_frequency_list("").is_err());
    }

    #[test]
    fn groups_must_partition() {
        assert!(FrequencyGroups::new(16, 5).is_err());
        let g = FrequencyGroups::new(12, 4).unwrap();
        assert_eq!(g.group_of(0), 0);
        assert_eq!(g.group_of(2), 0);
        assert_eq!(g.group_of(3), 1);
        assert_eq!(g.group_of(11), 3);
    }

    #[test]
    fn pool_of_ones_at_dc() {
        let x = Tensor::ones(&[3, 4, 4]);
        let b = build_dct_basis(4, 4, &[(0, 0)]).unwrap();
        let g = FrequencyGroups::new(3, 1).unwrap();
        let mf = multi_frequency_pool(&x, &b, &g).unwrap();
        assert_eq!(mf.data(), &[16.0, 16.0, 16.0]);
    }

    #[test]
    fn pool_rejects_partition_mismatch() {
        let x = Tensor::ones(&[4, 4, 4]);
        let b = build_dct_basis(4, 4, &[(0, 0)]).unwrap();
        let g = FrequencyGroups::new(2, 1).unwrap();
        assert!(multi_frequency_pool(&x, &b, &g).is_err());
    }

    #[test]
    fn attention_examples() {
        let mf = Tensor::from_vec(alloc::vec![3.0, -40.0, 7.5]);
        let a = attention_weights(&mf, &Tensor::zeros(&[3, 3]), &Tensor::zeros(&[3])).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));
        let x = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let half = Tensor::from_vec(alloc::vec![0.5, 1.0]);
        let y = apply_channel_attention(&x, &half).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0, 1.5, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(apply_channel_attention(&x, &Tensor::ones(&[2])).unwrap(), x);
        assert!(apply_channel_attention(&x, &Tensor::zeros(&[2]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(apply_channel_attention(&x, &Tensor::ones(&[3])).is_err());
    }
}
