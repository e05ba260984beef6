//! Lorentz (hyperboloid) model of hyperbolic space.
//!
//! Points live in `R^{d+1}` on the upper sheet `⟨x, x⟩_L = -c, x₀ > 0`, where
//! `⟨a, b⟩_L = -a₀b₀ + Σ aᵢbᵢ`. The sectional curvature is `-1/c`.
//!
//! Everything here is a free function over immutable inputs. The training
//! path uses the origin-specialised versions in [`crate::autodiff`]; this
//! module is the general reference kernel and the evaluation-time scorer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tangent norms below this select the zero branch of exp/log.
pub const ZERO_NORM: f64 = 1e-12;

/// Upper bound on tangent norms fed to the exponential map during training.
pub const MAX_TANGENT_NORM: f64 = 10.0;

/// Allowed tangency violation `|⟨v, x⟩_L|`, relative to `1 + ‖v‖‖x‖`.
pub const TANGENCY_TOL: f64 = 1e-6;

/// Curvature parameter `c > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curvature<T>(T);

impl<T: Scalar> Curvature<T> {
    pub fn new(c: T) -> Result<Self> {
        if c > T::zero() && c.is_finite() {
            Ok(Self(c))
        } else {
            Err(Error::Domain(format!("curvature must be positive, got {c}")))
        }
    }

    #[inline]
    pub fn c(self) -> T {
        self.0
    }

    #[inline]
    pub fn sqrt_c(self) -> T {
        self.0.sqrt()
    }
}

/// A point on the hyperboloid, stored in ambient coordinates `x₀..x_d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LorentzPoint<T> {
    coords: Vec<T>,
}

impl<T: Scalar> LorentzPoint<T> {
    /// Wraps ambient coordinates after checking the manifold constraint
    /// (relative tolerance 1e-6).
    pub fn new(coords: Vec<T>, cv: Curvature<T>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::Domain("lorentz point needs at least 2 coordinates".into()));
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite lorentz coordinates".into()));
        }
        let ip = lorentz_inner(&coords, &coords)?;
        let scale = T::one() + coords[0] * coords[0];
        if coords[0] <= T::zero() || (ip + cv.c()).abs() > T::lit(1e-6) * scale {
            return Err(Error::Domain(format!(
                "point off manifold: <x,x>_L = {ip}, expected {}",
                -cv.c()
            )));
        }
        Ok(Self { coords })
    }

    /// Builds a point from its spatial part; `x₀` is solved from the constraint.
    pub fn from_spatial(spatial: &[T], cv: Curvature<T>) -> Self {
        let sq: T = spatial.iter().map(|&v| v * v).sum();
        let mut coords = Vec::with_capacity(spatial.len() + 1);
        coords.push((cv.c() + sq).sqrt());
        coords.extend_from_slice(spatial);
        Self { coords }
    }

    #[inline]
    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    #[inline]
    pub fn spatial(&self) -> &[T] {
        &self.coords[1..]
    }

    /// Intrinsic dimension `d`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn into_coords(self) -> Vec<T> {
        self.coords
    }
}

/// A vector in the tangent space at `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector<T> {
    base: LorentzPoint<T>,
    coords: Vec<T>,
}

impl<T: Scalar> TangentVector<T> {
    /// Checks `⟨v, base⟩_L ≈ 0`.
    pub fn new(base: LorentzPoint<T>, coords: Vec<T>) -> Result<Self> {
        if coords.len() != base.coords.len() {
            return Err(Error::shape(
                "TangentVector::new",
                format!("{} coords for base of length {}", coords.len(), base.coords.len()),
            ));
        }
        let ip = lorentz_inner(&coords, &base.coords)?;
        let scale = T::one() + euclid_norm(&coords) * euclid_norm(&base.coords);
        if ip.abs() > T::lit(TANGENCY_TOL) * scale {
            return Err(Error::Domain(format!(
                "vector not tangent: <v,x>_L = {ip}"
            )));
        }
        Ok(Self { base, coords })
    }

    /// Tangent vector at the origin with zero time component.
    pub fn at_origin(spatial: &[T], cv: Curvature<T>) -> Self {
        let mut coords = Vec::with_capacity(spatial.len() + 1);
        coords.push(T::zero());
        coords.extend_from_slice(spatial);
        Self {
            base: origin(spatial.len(), cv),
            coords,
        }
    }

    pub fn zero(base: LorentzPoint<T>) -> Self {
        let coords = vec![T::zero(); base.coords.len()];
        Self { base, coords }
    }

    #[inline]
    pub fn base(&self) -> &LorentzPoint<T> {
        &self.base
    }

    #[inline]
    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    /// Riemannian norm `‖v‖_x = √⟨v, v⟩_L`, clamped at zero.
    pub fn norm(&self) -> T {
        lorentz_inner(&self.coords, &self.coords)
            .map(|ip| ip.max(T::zero()).sqrt())
            .unwrap_or_else(|_| T::zero())
    }
}

/// `‖v‖_x` from the spatial parts only, using the tangency constraint
/// `v0 = ⟨x_s, v_s⟩ / x0`; avoids cancelling the large squares of far bases.
fn tangent_norm<T: Scalar>(x: &[T], v: &[T], cv: Curvature<T>) -> T {
    let (xs, vs) = (&x[1..], &v[1..]);
    let mut cross = T::zero();
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let w = xs[i] * vs[j] - xs[j] * vs[i];
            cross = cross + w * w;
        }
    }
    let vv: T = vs.iter().map(|&a| a * a).sum();
    ((cv.c() * vv + cross).sqrt()) / x[0]
}

fn euclid_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `⟨a, b⟩_L = -a₀b₀ + Σ_{i≥1} aᵢbᵢ`.
pub fn lorentz_inner<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "lorentz_inner",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    if a.len() < 2 {
        return Err(Error::shape("lorentz_inner", "vectors need length >= 2"));
    }
    let spatial: T = a[1..].iter().zip(&b[1..]).map(|(&x, &y)| x * y).sum();
    Ok(spatial - a[0] * b[0])
}

/// The origin `(√c, 0, …, 0)` of `L^{d,c}`.
pub fn origin<T: Scalar>(d: usize, cv: Curvature<T>) -> LorentzPoint<T> {
    let mut coords = vec![T::zero(); d + 1];
    coords[0] = cv.sqrt_c();
    LorentzPoint { coords }
}

/// Recomputes `x₀ = √(c + Σ_{i≥1} xᵢ²)` so the point sits exactly on the sheet.
pub fn reproject<T: Scalar>(x: &[T], cv: Curvature<T>) -> Result<LorentzPoint<T>> {
    if x.len() < 2 {
        return Err(Error::shape("reproject", "vectors need length >= 2"));
    }
    if x[1..].iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite spatial coordinates".into()));
    }
    Ok(LorentzPoint::from_spatial(&x[1..], cv))
}

/// Exponential map at `x`.
///
/// `cosh(‖v‖/√c)·x + √c·sinh(‖v‖/√c)·v/‖v‖`, or `x` itself when `‖v‖_x` is
/// below [`ZERO_NORM`]. The result is reprojected onto the sheet.
pub fn exp_map<T: Scalar>(
    x: &LorentzPoint<T>,
    v: &TangentVector<T>,
    cv: Curvature<T>,
) -> Result<LorentzPoint<T>> {
    if v.coords.len() != x.coords.len() {
        return Err(Error::shape("exp_map", "tangent/base dimension mismatch"));
    }
    let ip = lorentz_inner(&v.coords, &x.coords)?;
    let scale = T::one() + euclid_norm(&v.coords) * euclid_norm(&x.coords);
    if ip.abs() > T::lit(TANGENCY_TOL) * scale {
        return Err(Error::Domain(format!(
            "exp_map: vector not tangent at base (<v,x>_L = {ip})"
        )));
    }
    let n = tangent_norm(&x.coords, &v.coords, cv);
    if n <= T::lit(ZERO_NORM) {
        return Ok(x.clone());
    }
    let sc = cv.sqrt_c();
    let (sh, ch) = ((n / sc).sinh(), (n / sc).cosh());
    let k = sc * sh / n;
    let out: Vec<T> = x
        .coords
        .iter()
        .zip(&v.coords)
        .map(|(&xi, &vi)| ch * xi + k * vi)
        .collect();
    reproject(&out, cv)
}

/// Logarithmic map at `x`: `d_L(x, y) · p / ‖p‖_x` with `p = y + (⟨x, y⟩_L / c)·x`.
pub fn log_map<T: Scalar>(
    x: &LorentzPoint<T>,
    y: &LorentzPoint<T>,
    cv: Curvature<T>,
) -> Result<TangentVector<T>> {
    if x.coords.len() != y.coords.len() {
        return Err(Error::shape("log_map", "dimension mismatch"));
    }
    // z = -<x, y>_L / c = 1 + ‖x - y‖²_L / 2c and ‖p‖²_x = c (z² - 1).
    let c = cv.c();
    let chord = chord_sq(x.spatial(), y.spatial(), cv);
    let zm1 = chord / (T::lit(2.0) * c);
    let z = T::one() + zm1;
    let pn = (c * zm1 * (z + T::one())).sqrt();
    if pn <= T::lit(ZERO_NORM) {
        return Ok(TangentVector::zero(x.clone()));
    }
    let p: Vec<T> = y
        .coords
        .iter()
        .zip(&x.coords)
        .map(|(&yi, &xi)| yi - z * xi)
        .collect();
    let dist = distance_spatial(x.spatial(), y.spatial(), cv);
    let s = dist / pn;
    Ok(TangentVector {
        base: x.clone(),
        coords: p.into_iter().map(|pi| s * pi).collect(),
    })
}

/// `√c · arccosh(-⟨x, y⟩_L / c)`, evaluated as `2√c · asinh(‖x - y‖_L / 2√c)`
/// so that nearby points keep full precision.
pub fn geodesic_distance<T: Scalar>(
    x: &LorentzPoint<T>,
    y: &LorentzPoint<T>,
    cv: Curvature<T>,
) -> Result<T> {
    if x.coords.len() != y.coords.len() {
        return Err(Error::shape("geodesic_distance", "dimension mismatch"));
    }
    Ok(distance_spatial(x.spatial(), y.spatial(), cv))
}

/// Squared Minkowski norm of `x - y`, with the time difference computed as
/// `(‖x_s‖² - ‖y_s‖²) / (x₀ + y₀)` to avoid cancellation.
fn chord_sq<T: Scalar>(xs: &[T], ys: &[T], cv: Curvature<T>) -> T {
    let c = cv.c();
    let x0 = (c + xs.iter().map(|&v| v * v).sum::<T>()).sqrt();
    let y0 = (c + ys.iter().map(|&v| v * v).sum::<T>()).sqrt();
    let diff_sq: T = xs.iter().zip(ys).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let cross: T = xs.iter().zip(ys).map(|(&a, &b)| (a - b) * (a + b)).sum();
    let dt = cross / (x0 + y0);
    (diff_sq - dt * dt).max(T::zero())
}

/// Embeds `v ∈ R^d` as `(0, v)` at the origin and applies `exp_o`.
pub fn lift_euclidean<T: Scalar>(v: &[T], cv: Curvature<T>) -> Result<LorentzPoint<T>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("lift_euclidean: non-finite input".into()));
    }
    let o = origin(v.len(), cv);
    exp_map(&o, &TangentVector::at_origin(v, cv), cv)
}

/// Tangent-space combination at the origin: `exp_o(Σ wₖ · log_o(pₖ))`.
///
/// Stands in for Möbius scalar multiplication and addition in the residual
/// update of the hyperbolic GNN layer.
pub fn tangent_combine<T: Scalar>(
    weights: &[T],
    points: &[LorentzPoint<T>],
    cv: Curvature<T>,
) -> Result<LorentzPoint<T>> {
    if weights.is_empty() || points.is_empty() {
        return Err(Error::InvalidArgument("tangent_combine: empty input".into()));
    }
    if weights.len() != points.len() {
        return Err(Error::shape(
            "tangent_combine",
            format!("{} weights for {} points", weights.len(), points.len()),
        ));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Domain("tangent_combine: non-finite weight".into()));
    }
    let d = points[0].dim();
    let o = origin(d, cv);
    let mut acc = vec![T::zero(); d + 1];
    for (&w, p) in weights.iter().zip(points) {
        if p.dim() != d {
            return Err(Error::shape("tangent_combine", "points differ in dimension"));
        }
        let t = log_map(&o, p, cv)?;
        for (a, &ti) in acc.iter_mut().zip(t.coords()) {
            *a += w * ti;
        }
    }
    // log_o outputs have an exactly-zero time component up to rounding.
    acc[0] = T::zero();
    exp_map(&o, &TangentVector { base: o.clone(), coords: acc }, cv)
}

/// Spatial part of `exp_o(u)` for `u ∈ R^d`: `√c·sinh(‖u‖/√c)·u/‖u‖`.
///
/// With the time coordinate implied by [`LorentzPoint::from_spatial`] this
/// equals [`lift_euclidean`].
pub fn exp_origin_spatial<T: Scalar>(u: &[T], cv: Curvature<T>) -> Vec<T> {
    let n = euclid_norm(u);
    if n <= T::lit(ZERO_NORM) {
        return u.to_vec();
    }
    let sc = cv.sqrt_c();
    let k = sc * (n / sc).sinh() / n;
    u.iter().map(|&x| k * x).collect()
}

/// Spatial part of `log_o(y)` from the spatial coordinates of `y`:
/// `√c·asinh(‖ys‖/√c)·ys/‖ys‖`.
pub fn log_origin_spatial<T: Scalar>(ys: &[T], cv: Curvature<T>) -> Vec<T> {
    let n = euclid_norm(ys);
    if n <= T::lit(ZERO_NORM) {
        return ys.to_vec();
    }
    let sc = cv.sqrt_c();
    let k = sc * (n / sc).asinh() / n;
    ys.iter().map(|&x| k * x).collect()
}

/// Geodesic distance between two points given only by their spatial parts.
pub fn distance_spatial<T: Scalar>(xs: &[T], ys: &[T], cv: Curvature<T>) -> T {
    let two_sc = T::lit(2.0) * cv.sqrt_c();
    two_sc * (chord_sq(xs, ys, cv).sqrt() / two_sc).asinh()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c1() -> Curvature<f64> {
        Curvature::new(1.0).unwrap()
    }

    #[test]
    fn curvature_must_be_positive() {
        assert!(Curvature::new(0.0f64).is_err());
        assert!(Curvature::new(-1.0f64).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
    }

    #[test]
    fn inner_product_examples() {
        let o = origin(3, c1());
        assert_eq!(lorentz_inner(o.coords(), o.coords()).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(lorentz_inner(&[2.0, 1.0, 1.0], &[1.0, 1.0, 0.0]).unwrap(), -1.0);
        assert!(lorentz_inner(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(lorentz_inner(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn origin_examples() {
        assert_eq!(origin(2, c1()).coords(), &[1.0, 0.0, 0.0]);
        let c4 = Curvature::new(4.0).unwrap();
        let o = origin(2, c4);
        assert_eq!(o.coords(), &[2.0, 0.0, 0.0]);
        assert_eq!(lorentz_inner(o.coords(), o.coords()).unwrap(), -4.0);
    }

    #[test]
    fn lift_examples() {
        assert_eq!(lift_euclidean(&[0.0, 0.0], c1()).unwrap(), origin(2, c1()));
        let p = lift_euclidean(&[0.7], c1()).unwrap();
        assert!((p.coords()[0] - 0.7f64.cosh()).abs() < 1e-12);
        assert!((p.coords()[1] - 0.7f64.sinh()).abs() < 1e-12);
        let q = lift_euclidean(&[1.5f64, -2.0, 0.3], Curvature::new(2.0).unwrap()).unwrap();
        assert!((lorentz_inner(q.coords(), q.coords()).unwrap() + 2.0).abs() < 1e-9);
        assert!(lift_euclidean(&[f64::NAN], c1()).is_err());
    }

    #[test]
    fn exp_map_examples() {
        let o = origin(2, c1());
        let zero = TangentVector::zero(o.clone());
        assert_eq!(exp_map(&o, &zero, c1()).unwrap(), o);
        let v = TangentVector::at_origin(&[1.0, 0.0], c1());
        let p = exp_map(&o, &v, c1()).unwrap();
        assert!((p.coords()[0] - 1f64.cosh()).abs() < 1e-12);
        assert!((p.coords()[1] - 1f64.sinh()).abs() < 1e-12);
        assert!((geodesic_distance(&o, &p, c1()).unwrap() - v.norm()).abs() < 1e-8);
    }

    #[test]
    fn exp_map_rejects_non_tangent() {
        let o = origin(2, c1());
        let bad = TangentVector {
            base: o.clone(),
            coords: vec![1.0, 0.0, 0.0],
        };
        assert!(matches!(exp_map(&o, &bad, c1()), Err(Error::Domain(_))));
        assert!(TangentVector::new(o, vec![1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn log_map_zero_branch() {
        let x = lift_euclidean(&[0.3, -0.4], c1()).unwrap();
        let v = log_map(&x, &x, c1()).unwrap();
        assert!(v.coords().iter().all(|&c| c.abs() < 1e-12));
    }

    #[test]
    fn distance_examples() {
        let o = origin(2, c1());
        assert_eq!(geodesic_distance(&o, &o, c1()).unwrap(), 0.0);
        let p = LorentzPoint::new(vec![1f64.cosh(), 1f64.sinh(), 0.0], c1()).unwrap();
        assert!((geodesic_distance(&p, &o, c1()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tangent_combine_examples() {
        let cv = Curvature::new(0.5).unwrap();
        let p = lift_euclidean(&[0.2, 1.1, -0.5], cv).unwrap();
        let q = lift_euclidean(&[-1.0, 0.0, 2.0], cv).unwrap();
        let close = |a: &LorentzPoint<f64>, b: &LorentzPoint<f64>| {
            a.coords()
                .iter()
                .zip(b.coords())
                .all(|(x, y)| (x - y).abs() < 1e-9)
        };
        assert!(close(&tangent_combine(&[1.0], &[p.clone()], cv).unwrap(), &p));
        assert!(close(
            &tangent_combine(&[0.0, 1.0], &[q.clone(), p.clone()], cv).unwrap(),
            &p
        ));
        assert!(close(
            &tangent_combine(&[0.5, 0.5], &[p.clone(), p.clone()], cv).unwrap(),
            &p
        ));
        assert!(tangent_combine::<f64>(&[], &[], cv).is_err());
        assert!(tangent_combine(&[1.0, 2.0], &[p], cv).is_err());
    }

    #[test]
    fn reproject_examples() {
        let r = reproject(&[0.0, 3.0, 4.0], c1()).unwrap();
        assert_eq!(r.coords(), &[26f64.sqrt(), 3.0, 4.0]);
        let on = lift_euclidean(&[0.4, 0.1], c1()).unwrap();
        let again = reproject(on.coords(), c1()).unwrap();
        for (a, b) in again.coords().iter().zip(on.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(reproject(r.coords(), c1()).unwrap(), r);
    }

    #[test]
    fn origin_specialisations_agree_with_general_maps() {
        let cv = Curvature::new(2.0f64).unwrap();
        let u = [0.8, -1.3, 0.25];
        let full = lift_euclidean(&u, cv).unwrap();
        let sp = exp_origin_spatial(&u, cv);
        for (a, b) in full.spatial().iter().zip(&sp) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = log_origin_spatial(&sp, cv);
        for (a, b) in back.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        let o = origin(3, cv);
        let lg = log_map(&o, &full, cv).unwrap();
        assert!(lg.coords()[0].abs() < 1e-12);
        let v = lift_euclidean(&[0.1, 0.2, -0.9], cv).unwrap();
        let d = geodesic_distance(&full, &v, cv).unwrap();
        assert!((d - distance_spatial(full.spatial(), v.spatial(), cv)).abs() < 1e-12);
    }

    #[test]
    fn single_precision_kernel() {
        let cv = Curvature::new(1.0f32).unwrap();
        let p = lift_euclidean(&[0.5f32, 0.5], cv).unwrap();
        let o = origin(2, cv);
        let back = exp_map(&o, &log_map(&o, &p, cv).unwrap(), cv).unwrap();
        for (a, b) in back.coords().iter().zip(p.coords()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
