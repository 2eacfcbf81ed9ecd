//! Targeted objective: average endpoint error to the target flow plus a
//! depth-scaled penalty on the positional offsets of every parent particle.

use crate::error::{Error, Result};
use crate::flow_field::FlowField;
use crate::geometry::{RigidTransform, Vec3};
use crate::metrics::aee;
use crate::particles::ParticleSet;
use crate::real::{CompensatedSum, Real};

/// Added under the square root of each endpoint error before differentiating.
pub const AEE_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms<T> {
    pub total: T,
    /// Exact `AEE(f̌, f^T)`.
    pub aee: T,
    pub penalty: T,
}

fn parents<T: Real>(ps: &ParticleSet<T>) -> Result<&[crate::particles::Particle<T>]> {
    if ps.expanded {
        return Err(Error::Contract("loss expects the parent particle set".into()));
    }
    Ok(&ps.particles)
}

/// `Σ_t α_t/|P| Σ_j ‖δ_t^j‖² / d_t^j` using the stored depths.
pub fn penalty<T: Real>(ps: &ParticleSet<T>, alpha1: f64, alpha2: f64) -> Result<T> {
    let ps_ = parents(ps)?;
    if ps_.is_empty() {
        return Ok(T::zero());
    }
    let n = T::from_usize_lossy(ps_.len());
    let (a1, a2) = (T::lit(alpha1) / n, T::lit(alpha2) / n);
    let mut s = CompensatedSum::new();
    for p in ps_ {
        if !(p.depth1 > T::zero() && p.depth2 > T::zero()) {
            return Err(Error::Contract("particle depth must be positive in the loss".into()));
        }
        s.add(a1 * p.offset1.norm_squared() / p.depth1);
        s.add(a2 * p.offset2.norm_squared() / p.depth2);
    }
    Ok(s.value())
}

pub fn loss<T: Real>(
    attacked: &FlowField<T>,
    target: &FlowField<T>,
    ps: &ParticleSet<T>,
    alpha1: f64,
    alpha2: f64,
) -> Result<LossTerms<T>> {
    let a = aee(attacked, target)?;
    let p = penalty(ps, alpha1, alpha2)?;
    Ok(LossTerms {
        total: a + p,
        aee: a,
        penalty: p,
    })
}

/// Loss terms with the gradient of the smoothed objective with respect to
/// the attacked flow and to each parent's `δ1`, `δ2`. The depths are
/// recomputed from the offsets, so their dependence on `δ` is included.
#[allow(clippy::type_complexity)]
pub fn loss_and_grad<T: Real>(
    attacked: &FlowField<T>,
    target: &FlowField<T>,
    ps: &ParticleSet<T>,
    rel: &RigidTransform<T>,
    alpha1: f64,
    alpha2: f64,
) -> Result<(LossTerms<T>, FlowField<T>, Vec<Vec3<T>>, Vec<Vec3<T>>)> {
    let terms = loss(attacked, target, ps, alpha1, alpha2)?;
    let n = T::from_usize_lossy(attacked.len());
    let eps = T::lit(AEE_SMOOTHING);
    let gflow = FlowField::from_fn(attacked.width(), attacked.height(), |x, y| {
        let (u, v) = attacked.get(x, y);
        let (tu, tv) = target.get(x, y);
        let (du, dv) = (u - tu, v - tv);
        let m = (du * du + dv * dv + eps).sqrt() * n;
        (du / m, dv / m)
    });
    let ps_ = parents(ps)?;
    let np = T::from_usize_lossy(ps_.len().max(1));
    let (a1, a2) = (T::lit(alpha1) / np, T::lit(alpha2) / np);
    // ∂d2/∂δ1 is the third row of the relative rotation
    let r = rel.rotation.0[2];
    let dz1 = Vec3::new(r[0], r[1], r[2]);
    let ez = Vec3::new(T::zero(), T::zero(), T::one());
    let mut g1 = Vec::with_capacity(ps_.len());
    let mut g2 = Vec::with_capacity(ps_.len());
    for p in ps_ {
        let (q1, q2) = p.camera_points(rel);
        let (d1, d2) = (q1.z(), q2.z());
        let (n1, n2) = (p.offset1.norm_squared(), p.offset2.norm_squared());
        let c1 = a1 * n1 / (d1 * d1);
        let c2 = a2 * n2 / (d2 * d2);
        g1.push(p.offset1.scale(T::two() * a1 / d1) - ez.scale(c1) - dz1.scale(c2));
        g2.push(p.offset2.scale(T::two() * a2 / d2) - ez.scale(c2));
    }
    Ok((terms, gflow, g1, g2))
}
