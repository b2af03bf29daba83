//! The four relation-specific multiplications used by the message branches,
//! together with their exact gradients.
//!
//! Every branch multiplies an entity state by a relation embedding in a fixed
//! commutative algebra: plain reals (Hadamard product), complex numbers
//! (i^2 = -1), split-complex numbers (j^2 = +1), or dual numbers (eps^2 = 0).
//! Two-component algebras store a width-`d` vector as re-part `[0, d/2)` and
//! im-part `[d/2, d)`, so all branches expose the same flat width downstream.

use crate::error::{Error, Result};

/// Number system a branch multiplies in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum BranchKind {
    Real,
    Complex,
    SplitComplex,
    Dual,
}

impl BranchKind {
    /// Number of algebra components: 1 for `Real`, 2 for the paired kinds.
    pub fn components(self) -> usize {
        match self {
            BranchKind::Real => 1,
            _ => 2,
        }
    }

    /// True when `width` is a legal vector width for this kind.
    pub fn valid_width(self, width: usize) -> bool {
        width >= 1 && (self.components() == 1 || width % 2 == 0)
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Real => "real",
            BranchKind::Complex => "complex",
            BranchKind::SplitComplex => "split_complex",
            BranchKind::Dual => "dual",
        }
    }

    /// Parse a config token such as `complex` or `split_complex`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "distmult" => Ok(BranchKind::Real),
            "complex" => Ok(BranchKind::Complex),
            "split_complex" | "split-complex" | "split" => Ok(BranchKind::SplitComplex),
            "dual" => Ok(BranchKind::Dual),
            other => Err(Error::Config(format!("unknown branch kind `{other}`"))),
        }
    }
}

/// Flat real vector tagged with the algebra its halves multiply in.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraicVector {
    pub data: Vec<f64>,
    pub kind: BranchKind,
}

impl AlgebraicVector {
    pub fn new(kind: BranchKind, data: Vec<f64>) -> Result<Self> {
        if !kind.valid_width(data.len()) {
            return Err(Error::Rejected(format!(
                "width {} invalid for {} (two-component kinds need an even width)",
                data.len(),
                kind.name()
            )));
        }
        Ok(Self { data, kind })
    }

    pub fn width(&self) -> usize {
        self.data.len()
    }
}

fn check_pair(x: &AlgebraicVector, r: &AlgebraicVector) -> Result<()> {
    if x.kind != r.kind {
        return Err(Error::Rejected(format!(
            "kind mismatch: {} vs {}",
            x.kind.name(),
            r.kind.name()
        )));
    }
    if x.width() != r.width() {
        return Err(Error::Rejected(format!(
            "width mismatch: {} vs {}",
            x.width(),
            r.width()
        )));
    }
    Ok(())
}

/// Row kernel: `out[..] = x (*) r` in the given algebra. All slices have equal
/// length, even for the paired kinds. This is the hot loop shared by the
/// vector API and the batched tape op.
#[inline]
pub fn relmul_slice(kind: BranchKind, x: &[f64], r: &[f64], out: &mut [f64]) {
    let d = x.len();
    if kind == BranchKind::Real {
        for ((o, &a), &b) in out.iter_mut().zip(x).zip(r) {
            *o = a * b;
        }
        return;
    }
    let h = d / 2;
    let (xre, xim) = x.split_at(h);
    let (rre, rim) = r.split_at(h);
    let (ore, oim) = out.split_at_mut(h);
    match kind {
        BranchKind::Complex => {
            for i in 0..h {
                ore[i] = xre[i] * rre[i] - xim[i] * rim[i];
                oim[i] = xre[i] * rim[i] + xim[i] * rre[i];
            }
        }
        BranchKind::SplitComplex => {
            for i in 0..h {
                ore[i] = xre[i] * rre[i] + xim[i] * rim[i];
                oim[i] = xre[i] * rim[i] + xim[i] * rre[i];
            }
        }
        BranchKind::Dual => {
            for i in 0..h {
                ore[i] = xre[i] * rre[i];
                oim[i] = xre[i] * rim[i] + xim[i] * rre[i];
            }
        }
        BranchKind::Real => unreachable!(),
    }
}

/// Row kernel for the gradients of `<upstream, relmul(x, r)>`. Accumulates
/// into `gx` and `gr` so the batched op can reuse buffers.
#[inline]
pub fn relmul_backward_slice(
    kind: BranchKind,
    x: &[f64],
    r: &[f64],
    upstream: &[f64],
    gx: &mut [f64],
    gr: &mut [f64],
) {
    let d = x.len();
    match kind {
        BranchKind::Real => {
            for i in 0..d {
                gx[i] += upstream[i] * r[i];
                gr[i] += upstream[i] * x[i];
            }
        }
        BranchKind::Complex => {
            // out_re = x_re r_re - x_im r_im, out_im = x_re r_im + x_im r_re
            let h = d / 2;
            for i in 0..h {
                let (ur, ui) = (upstream[i], upstream[h + i]);
                gx[i] += ur * r[i] + ui * r[h + i];
                gx[h + i] += -ur * r[h + i] + ui * r[i];
                gr[i] += ur * x[i] + ui * x[h + i];
                gr[h + i] += -ur * x[h + i] + ui * x[i];
            }
        }
        BranchKind::SplitComplex => {
            let h = d / 2;
            for i in 0..h {
                let (ur, ui) = (upstream[i], upstream[h + i]);
                gx[i] += ur * r[i] + ui * r[h + i];
                gx[h + i] += ur * r[h + i] + ui * r[i];
                gr[i] += ur * x[i] + ui * x[h + i];
                gr[h + i] += ur * x[h + i] + ui * x[i];
            }
        }
        BranchKind::Dual => {
            // out_re = x_re r_re, out_im = x_re r_im + x_im r_re
            let h = d / 2;
            for i in 0..h {
                let (ur, ui) = (upstream[i], upstream[h + i]);
                gx[i] += ur * r[i] + ui * r[h + i];
                gx[h + i] += ui * r[i];
                gr[i] += ur * x[i] + ui * x[h + i];
                gr[h + i] += ui * x[i];
            }
        }
    }
}

/// Relation-specific multiplication `f_r(x)` for the branch's algebra.
pub fn relmul(kind: BranchKind, x: &AlgebraicVector, r: &AlgebraicVector) -> Result<AlgebraicVector> {
    check_pair(x, r)?;
    if x.kind != kind || !kind.valid_width(x.width()) {
        return Err(Error::Rejected(format!(
            "operands carry kind {} but relmul was called for {}",
            x.kind.name(),
            kind.name()
        )));
    }
    let mut out = vec![0.0; x.width()];
    relmul_slice(kind, &x.data, &r.data, &mut out);
    Ok(AlgebraicVector { data: out, kind })
}

/// Exact gradients of `<upstream, relmul(x, r)>` with respect to `x` and `r`.
/// The maps are bilinear, so these are closed-form.
pub fn relmul_backward(
    kind: BranchKind,
    x: &AlgebraicVector,
    r: &AlgebraicVector,
    upstream: &AlgebraicVector,
) -> Result<(AlgebraicVector, AlgebraicVector)> {
    check_pair(x, r)?;
    check_pair(x, upstream)?;
    if x.kind != kind {
        return Err(Error::Rejected(format!(
            "operands carry kind {} but relmul_backward was called for {}",
            x.kind.name(),
            kind.name()
        )));
    }
    let d = x.width();
    let mut gx = vec![0.0; d];
    let mut gr = vec![0.0; d];
    relmul_backward_slice(kind, &x.data, &r.data, &upstream.data, &mut gx, &mut gr);
    Ok((
        AlgebraicVector { data: gx, kind },
        AlgebraicVector { data: gr, kind },
    ))
}

/// Multiplicative identity: `relmul(kind, x, identity) == x` for all `x`.
pub fn identity_element(kind: BranchKind, width: usize) -> Result<AlgebraicVector> {
    if !kind.valid_width(width) {
        return Err(Error::Rejected(format!(
            "width {width} invalid for {}",
            kind.name()
        )));
    }
    let mut data = vec![0.0; width];
    let ones = if kind.components() == 1 { width } else { width / 2 };
    for v in data.iter_mut().take(ones) {
        *v = 1.0;
    }
    Ok(AlgebraicVector { data, kind })
}

pub const ALL_KINDS: [BranchKind; 4] = [
    BranchKind::Real,
    BranchKind::Complex,
    BranchKind::SplitComplex,
    BranchKind::Dual,
];
