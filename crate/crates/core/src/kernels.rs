//! Green's functions and layer-potential kernels for Laplace (`k = 0`) and
//! Helmholtz.
//!
//! Sign conventions: `D[1] = -1` at interior points, so the exterior limit of
//! the double layer is `σ/2 + D[σ]`.

use crate::{Error, Result, Vec3, C64};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const FOUR_PI: f64 = 4.0 * PI;

/// Distances below this are treated as coincident points.
pub const SINGULAR_RADIUS: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    SingleLayer,
    DoubleLayer,
    AdjointDoubleLayer,
    /// `beta_d * D + beta_s * S`.
    CombinedField,
}

/// A layer-potential kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Wavenumber; zero selects Laplace.
    pub k: C64,
    pub beta_d: C64,
    pub beta_s: C64,
}

impl KernelSpec {
    fn with(family: KernelFamily, k: C64) -> Self {
        Self {
            family,
            k,
            beta_d: C64::new(0.0, 0.0),
            beta_s: C64::new(0.0, 0.0),
        }
    }

    pub fn single(k: C64) -> Self {
        Self::with(KernelFamily::SingleLayer, k)
    }

    pub fn double(k: C64) -> Self {
        Self::with(KernelFamily::DoubleLayer, k)
    }

    pub fn adjoint_double(k: C64) -> Self {
        Self::with(KernelFamily::AdjointDoubleLayer, k)
    }

    pub fn combined(k: C64, beta_d: C64, beta_s: C64) -> Self {
        Self {
            family: KernelFamily::CombinedField,
            k,
            beta_d,
            beta_s,
        }
    }

    /// `D_k - ik S_k`, the exterior Dirichlet combined-field operator (minus the identity term).
    pub fn cfie(k: C64) -> Self {
        Self::combined(k, C64::new(1.0, 0.0), -C64::i() * k)
    }

    pub fn laplace_single() -> Self {
        Self::single(C64::new(0.0, 0.0))
    }

    pub fn laplace_double() -> Self {
        Self::double(C64::new(0.0, 0.0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k.re.is_finite() && self.k.im.is_finite()) {
            return Err(Error::Argument("wavenumber must be finite".into()));
        }
        if self.k.im < 0.0 {
            return Err(Error::Argument(format!(
                "wavenumber {} has negative imaginary part",
                self.k
            )));
        }
        Ok(())
    }

    pub fn needs_source_normal(&self) -> bool {
        matches!(
            self.family,
            KernelFamily::DoubleLayer | KernelFamily::CombinedField
        )
    }

    pub fn needs_target_normal(&self) -> bool {
        self.family == KernelFamily::AdjointDoubleLayer
    }

    pub fn is_laplace(&self) -> bool {
        self.k == C64::new(0.0, 0.0)
    }

    /// Checked kernel value `K(x, y)`.
    pub fn value(&self, x: &Vec3, y: &Vec3, n_y: Option<&Vec3>, n_x: Option<&Vec3>) -> Result<C64> {
        let r = (x - y).norm();
        if r < SINGULAR_RADIUS {
            return Err(Error::Singular(r));
        }
        let zero = Vec3::zeros();
        let ny = match n_y {
            Some(n) => n,
            None if self.needs_source_normal() => {
                return Err(Error::Argument(format!(
                    "{:?} kernel needs the source normal",
                    self.family
                )))
            }
            None => &zero,
        };
        let nx = match n_x {
            Some(n) => n,
            None if self.needs_target_normal() => {
                return Err(Error::Argument(
                    "adjoint double layer needs the target normal".into(),
                ))
            }
            None => &zero,
        };
        Ok(self.eval(x, y, ny, nx))
    }

    /// Unchecked kernel value. Coincident points contribute zero; unused
    /// normals are ignored.
    #[inline]
    pub fn eval(&self, x: &Vec3, y: &Vec3, n_y: &Vec3, n_x: &Vec3) -> C64 {
        let d = x - y;
        let r2 = d.norm_squared();
        if r2 < SINGULAR_RADIUS * SINGULAR_RADIUS {
            return C64::new(0.0, 0.0);
        }
        let r = r2.sqrt();
        let g = green_r(self.k, r);
        match self.family {
            KernelFamily::SingleLayer => g,
            KernelFamily::DoubleLayer => {
                // n_y . grad_y G = (n_y.(x-y)/r) (1 - ikr) G / r
                g * (C64::new(1.0, 0.0) - C64::i() * self.k * r) * (n_y.dot(&d) / r2)
            }
            KernelFamily::AdjointDoubleLayer => {
                -g * (C64::new(1.0, 0.0) - C64::i() * self.k * r) * (n_x.dot(&d) / r2)
            }
            KernelFamily::CombinedField => {
                let dl = g * (C64::new(1.0, 0.0) - C64::i() * self.k * r) * (n_y.dot(&d) / r2);
                self.beta_d * dl + self.beta_s * g
            }
        }
    }

    /// Single and double layer parts of the kernel at once, for families that
    /// decompose as `a * D + b * S`. Returns `(a, b)`.
    pub fn decomposition(&self) -> Option<(C64, C64)> {
        let one = C64::new(1.0, 0.0);
        let zero = C64::new(0.0, 0.0);
        match self.family {
            KernelFamily::SingleLayer => Some((zero, one)),
            KernelFamily::DoubleLayer => Some((one, zero)),
            KernelFamily::CombinedField => Some((self.beta_d, self.beta_s)),
            KernelFamily::AdjointDoubleLayer => None,
        }
    }
}

#[inline]
fn green_r(k: C64, r: f64) -> C64 {
    if k.re == 0.0 && k.im == 0.0 {
        C64::new(1.0 / (FOUR_PI * r), 0.0)
    } else {
        (C64::i() * k * r).exp() / (FOUR_PI * r)
    }
}

/// Free-space Green's function `exp(ikr) / (4πr)`.
pub fn greens(k: C64, x: &Vec3, y: &Vec3) -> Result<C64> {
    let r = (x - y).norm();
    if r < SINGULAR_RADIUS {
        return Err(Error::Singular(r));
    }
    Ok(green_r(k, r))
}

/// `∇_x G(x, y)`.
pub fn greens_gradient(k: C64, x: &Vec3, y: &Vec3) -> Result<[C64; 3]> {
    let d = x - y;
    let r = d.norm();
    if r < SINGULAR_RADIUS {
        return Err(Error::Singular(r));
    }
    // dG/dr = G (ik - 1/r)
    let f = green_r(k, r) * (C64::i() * k - 1.0 / r) / r;
    Ok([f * d.x, f * d.y, f * d.z])
}
