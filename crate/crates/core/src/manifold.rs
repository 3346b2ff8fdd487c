//! Poincaré-ball kernels with curvature `c`.
//!
//! Two flavors of every operation live here: point-level functions on
//! plain coordinate slices ([`mobius_add`], [`exp_map`], ...) and
//! row-batched differentiable versions recorded on a [`Tape`]
//! ([`mobius_add_rows`], [`exp0_rows`], ...), where each row of a matrix is
//! one point. Outputs of both flavors are projected into the ball of radius
//! `(1 - boundary_eps) / sqrt(c)`.
//!
//! Zero-vector conventions are the continuity limits: `M (x) 0 = 0`,
//! `exp_x(0) = x`, `log_x(x) = 0`.

use thiserror::Error;

use crate::ndtensor::{Tape, Tensor, TensorError, Var};
use crate::scalar::Real;

/// Norms below this are treated as zero when dividing by a norm.
pub const MIN_NORM: f64 = 1e-15;

/// Möbius addition fails when its denominator falls below this.
pub const MIN_DENOMINATOR: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("invalid ball configuration: {0}")]
    Config(String),
    #[error("möbius denominator degenerate ({0:e})")]
    DegenerateDenominator(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ManifoldError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallConfig<T: Real = f64> {
    c: T,
    boundary_eps: T,
}

impl<T: Real> Default for BallConfig<T> {
    fn default() -> Self {
        Self {
            c: T::one(),
            boundary_eps: T::of(1e-5),
        }
    }
}

impl<T: Real> BallConfig<T> {
    pub fn new(c: T, boundary_eps: T) -> Result<Self> {
        if !(c > T::zero()) || !c.is_finite() {
            return Err(ManifoldError::Config(format!("curvature must be positive, got {c}")));
        }
        if !(boundary_eps > T::zero() && boundary_eps < T::one()) {
            return Err(ManifoldError::Config(format!(
                "boundary_eps must lie in (0, 1), got {boundary_eps}"
            )));
        }
        Ok(Self { c, boundary_eps })
    }

    /// Ball of curvature `c` with the default boundary margin `1e-5`.
    pub fn with_curvature(c: T) -> Result<Self> {
        Self::new(c, T::of(1e-5))
    }

    pub fn c(&self) -> T {
        self.c
    }

    pub fn boundary_eps(&self) -> T {
        self.boundary_eps
    }

    pub fn sqrt_c(&self) -> T {
        self.c.sqrt()
    }

    /// Largest admissible Euclidean norm, `(1 - eps) / sqrt(c)`.
    pub fn max_norm(&self) -> T {
        (T::one() - self.boundary_eps) / self.sqrt_c()
    }
}

/// A point strictly inside the ball. Constructors project.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincarePoint<T: Real = f64> {
    coords: Vec<T>,
}

impl<T: Real> PoincarePoint<T> {
    pub fn origin(dim: usize) -> Self {
        Self {
            coords: vec![T::zero(); dim],
        }
    }

    /// Projects `coords` into the ball.
    pub fn new(coords: Vec<T>, cfg: &BallConfig<T>) -> Self {
        project_to_ball(&coords, cfg)
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<T> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> T {
        norm(&self.coords)
    }

    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|&v| -v).collect(),
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn scaled<T: Real>(a: &[T], s: T) -> Vec<T> {
    a.iter().map(|&v| v * s).collect()
}

#[inline]
fn artanh<T: Real>(x: T) -> T {
    T::of(0.5) * ((T::one() + x) / (T::one() - x)).ln()
}

/// Rescales `x` onto norm `(1 - eps) / sqrt(c)` when it lies outside;
/// identity otherwise.
pub fn project_to_ball<T: Real>(x: &[T], cfg: &BallConfig<T>) -> PoincarePoint<T> {
    let n = norm(x);
    let max = cfg.max_norm();
    let coords = if n > max { scaled(x, max / n) } else { x.to_vec() };
    PoincarePoint { coords }
}

/// Conformal factor `2 / (1 - c ||x||^2)`.
pub fn conformal_factor<T: Real>(x: &PoincarePoint<T>, cfg: &BallConfig<T>) -> T {
    T::of(2.0) / (T::one() - cfg.c() * dot(&x.coords, &x.coords))
}

fn mobius_add_raw<T: Real>(x: &[T], y: &[T], c: T) -> (Vec<T>, T) {
    let xy = dot(x, y);
    let x2 = dot(x, x);
    let y2 = dot(y, y);
    let two = T::of(2.0);
    let a = T::one() + two * c * xy + c * y2;
    let b = T::one() - c * x2;
    let den = T::one() + two * c * xy + c * c * x2 * y2;
    let out = x.iter().zip(y).map(|(&xi, &yi)| (a * xi + b * yi) / den).collect();
    (out, den)
}

/// Möbius addition `x (+)_c y`.
pub fn mobius_add<T: Real>(
    x: &PoincarePoint<T>,
    y: &PoincarePoint<T>,
    cfg: &BallConfig<T>,
) -> Result<PoincarePoint<T>> {
    if x.dim() != y.dim() {
        return Err(ManifoldError::Dimension(x.dim(), y.dim()));
    }
    let (out, den) = mobius_add_raw(&x.coords, &y.coords, cfg.c());
    if den.abs() < T::of(MIN_DENOMINATOR) {
        return Err(ManifoldError::DegenerateDenominator(den.as_f64()));
    }
    Ok(project_to_ball(&out, cfg))
}

/// Möbius matrix-vector product `M (x)_c x` with `m` of shape `[out, in]`.
pub fn mobius_matvec<T: Real>(
    m: &Tensor<T>,
    x: &PoincarePoint<T>,
    cfg: &BallConfig<T>,
) -> Result<PoincarePoint<T>> {
    if m.cols() != x.dim() {
        return Err(ManifoldError::Dimension(m.cols(), x.dim()));
    }
    let mx: Vec<T> = (0..m.rows()).map(|i| dot(m.row(i), &x.coords)).collect();
    let xn = x.norm();
    let mxn = norm(&mx);
    if xn <= T::zero() || mxn <= T::zero() {
        return Ok(PoincarePoint::origin(m.rows()));
    }
    let sc = cfg.sqrt_c();
    let inner = (sc * xn).min(T::one() - cfg.boundary_eps());
    let t = (mxn / xn * artanh(inner)).tanh() / sc;
    Ok(project_to_ball(&scaled(&mx, t / mxn), cfg))
}

/// Exponential map at `x`: `x (+)_c (tanh(sqrt(c) lambda_x ||v|| / 2) v / (sqrt(c) ||v||))`.
pub fn exp_map<T: Real>(x: &PoincarePoint<T>, v: &[T], cfg: &BallConfig<T>) -> Result<PoincarePoint<T>> {
    if x.dim() != v.len() {
        return Err(ManifoldError::Dimension(x.dim(), v.len()));
    }
    let vn = norm(v);
    if vn <= T::zero() {
        return Ok(x.clone());
    }
    let sc = cfg.sqrt_c();
    let lam = conformal_factor(x, cfg);
    let s = (sc * lam * vn / T::of(2.0)).tanh() / (sc * vn);
    let second = project_to_ball(&scaled(v, s), cfg);
    mobius_add(x, &second, cfg)
}

/// Logarithmic map at `x`:
/// `(2 / (sqrt(c) lambda_x)) artanh(sqrt(c) ||u||) u / ||u||` with `u = -x (+)_c y`.
pub fn log_map<T: Real>(x: &PoincarePoint<T>, y: &PoincarePoint<T>, cfg: &BallConfig<T>) -> Result<Vec<T>> {
    let u = mobius_add(&x.neg(), y, cfg)?;
    let un = u.norm();
    if un <= T::zero() {
        return Ok(vec![T::zero(); x.dim()]);
    }
    let sc = cfg.sqrt_c();
    let lam = conformal_factor(x, cfg);
    let inner = (sc * un).min(T::one() - cfg.boundary_eps());
    let s = T::of(2.0) / (sc * lam) * artanh(inner) / un;
    Ok(scaled(&u.coords, s))
}

/// `exp_0(v) = tanh(sqrt(c) ||v||) v / (sqrt(c) ||v||)`.
pub fn exp0<T: Real>(v: &[T], cfg: &BallConfig<T>) -> PoincarePoint<T> {
    let vn = norm(v);
    if vn <= T::zero() {
        return PoincarePoint::origin(v.len());
    }
    let sc = cfg.sqrt_c();
    project_to_ball(&scaled(v, (sc * vn).tanh() / (sc * vn)), cfg)
}

/// `log_0(y) = artanh(sqrt(c) ||y||) y / (sqrt(c) ||y||)`.
pub fn log0<T: Real>(y: &PoincarePoint<T>, cfg: &BallConfig<T>) -> Vec<T> {
    let yn = y.norm();
    if yn <= T::zero() {
        return vec![T::zero(); y.dim()];
    }
    let sc = cfg.sqrt_c();
    let inner = (sc * yn).min(T::one() - cfg.boundary_eps());
    scaled(&y.coords, artanh(inner) / (sc * yn))
}

/// Geodesic distance `(2 / sqrt(c)) artanh(sqrt(c) ||-x (+)_c y||)`.
pub fn distance<T: Real>(x: &PoincarePoint<T>, y: &PoincarePoint<T>, cfg: &BallConfig<T>) -> Result<T> {
    let u = mobius_add(&x.neg(), y, cfg)?;
    let sc = cfg.sqrt_c();
    let inner = (sc * u.norm()).min(T::one() - cfg.boundary_eps());
    Ok(T::of(2.0) / sc * artanh(inner))
}

// ---------------------------------------------------------------------------
// Row-batched differentiable kernels.

/// Projects every row into the ball.
pub fn project_rows<'t, T: Real>(x: Var<'t, T>, cfg: &BallConfig<T>) -> Var<'t, T> {
    x.clip_row_norm(cfg.max_norm())
}

fn safe_norm<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    x.l2_norm_rows().clamp_min(T::of(MIN_NORM))
}

/// Row-wise `exp_0`.
pub fn exp0_rows<'t, T: Real>(v: Var<'t, T>, cfg: &BallConfig<T>) -> Result<Var<'t, T>> {
    let sc = cfg.sqrt_c();
    let n = safe_norm(v).scalar_mul(sc);
    let coef = n.tanh().hadamard(n.recip()?)?;
    Ok(project_rows(v.mul_col(coef)?, cfg))
}

/// Row-wise `log_0`; inputs are projected first.
pub fn log0_rows<'t, T: Real>(y: Var<'t, T>, cfg: &BallConfig<T>) -> Result<Var<'t, T>> {
    let y = project_rows(y, cfg);
    let sc = cfg.sqrt_c();
    let n = safe_norm(y).scalar_mul(sc);
    let coef = n.artanh()?.hadamard(n.recip()?)?;
    Ok(y.mul_col(coef)?)
}

/// Row-wise Möbius addition of equally shaped point matrices.
pub fn mobius_add_rows<'t, T: Real>(x: Var<'t, T>, y: Var<'t, T>, cfg: &BallConfig<T>) -> Result<Var<'t, T>> {
    let c = cfg.c();
    let two = T::of(2.0);
    let xy = x.row_dot(y)?;
    let x2 = x.row_dot(x)?;
    let y2 = y.row_dot(y)?;
    // 1 + 2c<x,y> + c|y|^2
    let a = xy.scalar_mul(two * c).add(y2.scalar_mul(c))?.add_scalar(T::one());
    // 1 - c|x|^2
    let b = x2.scalar_mul(-c).add_scalar(T::one());
    // 1 + 2c<x,y> + c^2 |x|^2 |y|^2
    let den = xy
        .scalar_mul(two * c)
        .add(x2.hadamard(y2)?.scalar_mul(c * c))?
        .add_scalar(T::one());
    let worst = den.with_value(|d| d.data().iter().map(|v| v.abs()).fold(T::infinity(), T::min));
    if worst < T::of(MIN_DENOMINATOR) {
        return Err(ManifoldError::DegenerateDenominator(worst.as_f64()));
    }
    let num = x.mul_col(a)?.add(y.mul_col(b)?)?;
    Ok(project_rows(num.div_col(den)?, cfg))
}

/// Row-wise Möbius matrix multiplication: each row `x_i` maps to
/// `W^T (x)_c x_i` where `w` has shape `[in, out]` (so the Euclidean part
/// is `x.matmul(w)`).
pub fn mobius_matvec_rows<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, cfg: &BallConfig<T>) -> Result<Var<'t, T>> {
    let sc = cfg.sqrt_c();
    let x = project_rows(x, cfg);
    let mx = x.matmul(w)?;
    let xn = safe_norm(x);
    let mxn = safe_norm(mx);
    let inner = xn.scalar_mul(sc).artanh()?;
    let ratio = mxn.hadamard(xn.recip()?)?;
    let t = ratio.hadamard(inner)?.tanh().scalar_mul(T::one() / sc);
    let coef = t.hadamard(mxn.recip()?)?;
    Ok(project_rows(mx.mul_col(coef)?, cfg))
}

/// Convenience: records `points` (one per row) as a constant matrix.
pub fn points_to_var<'t, T: Real>(tape: &'t Tape<T>, points: &[PoincarePoint<T>]) -> Result<Var<'t, T>> {
    let d = points.first().map_or(0, PoincarePoint::dim);
    let rows: Vec<Vec<T>> = points.iter().map(|p| p.coords.clone()).collect();
    if rows.iter().any(|r| r.len() != d) {
        return Err(ManifoldError::Dimension(d, 0));
    }
    Ok(tape.constant(Tensor::from_rows(&rows)?))
}
