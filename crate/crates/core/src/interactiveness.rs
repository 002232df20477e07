//! Interactiveness gates derived from the similarity fields.

use crate::grounding::{ImportanceField, RegionMask, SimilarityField};
use crate::numerics::dot;
use crate::params::RegFormerParams;
use crate::{Error, Real, Result};

/// Patch-level interactiveness `s_hat(p)` for the human and every object class.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchInteractiveness<T> {
    pub s_hat_h: Vec<T>,
    pub s_hat_o: Vec<Vec<T>>,
}

pub fn patch_interactiveness<T: Real>(
    field: &SimilarityField<T>,
    params: &RegFormerParams<T>,
) -> PatchInteractiveness<T> {
    let h = &params.sig_inter_h;
    let o = &params.sig_inter_o;
    PatchInteractiveness {
        s_hat_h: field.s_h.iter().map(|&s| h.apply(s)).collect(),
        s_hat_o: field
            .s_o
            .iter()
            .map(|f| f.iter().map(|&s| o.apply(s)).collect())
            .collect(),
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} patches")));
    }
    Ok(())
}

/// Importance-weighted interactiveness `r = sum_p alpha(p) s_hat(p)`.
pub fn image_interactiveness<T: Real>(alpha: &ImportanceField<T>, s_hat: &[T]) -> Result<T> {
    check_len(alpha.len(), s_hat.len(), "image interactiveness")?;
    Ok(dot(&alpha.alpha, s_hat))
}

/// Geometric mean `sqrt(r_h r_o)`.
pub fn pairwise_interactiveness<T: Real>(r_h: T, r_o: T) -> Result<T> {
    if !(r_h > T::zero()) || !(r_o > T::zero()) {
        return Err(Error::Argument(format!(
            "interactiveness scores must be positive, got ({r_h}, {r_o})"
        )));
    }
    Ok((r_h * r_o).sqrt())
}

/// Instance gate `r = local * masked_global` with its two factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceInteractiveness<T> {
    pub r: T,
    /// Interactiveness aggregated with the instance-restricted importance.
    pub local: T,
    /// Image-level importance mass falling inside the instance mask.
    pub masked_global: T,
}

pub fn instance_interactiveness<T: Real>(
    alpha_inst: &ImportanceField<T>,
    s_hat: &[T],
    alpha_image: &ImportanceField<T>,
    mask: &RegionMask,
) -> Result<InstanceInteractiveness<T>> {
    check_len(alpha_inst.len(), s_hat.len(), "instance importance vs interactiveness")?;
    check_len(alpha_image.len(), mask.bits().len(), "image importance vs mask")?;
    let local = dot(&alpha_inst.alpha, s_hat);
    let masked_global = alpha_image
        .alpha
        .iter()
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .map(|(&a, _)| a)
        .sum::<T>();
    Ok(InstanceInteractiveness {
        r: local * masked_global,
        local,
        masked_global,
    })
}

/// Image-level gates for classification: `r_h`, `r_o[k]` and `r_ho[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractivenessReport<T> {
    pub r_h: T,
    pub r_o: Vec<T>,
    pub r_ho: Vec<T>,
}

pub fn image_report<T: Real>(
    alpha_h: &ImportanceField<T>,
    alpha_o: &[ImportanceField<T>],
    patch: &PatchInteractiveness<T>,
) -> Result<InteractivenessReport<T>> {
    let r_h = image_interactiveness(alpha_h, &patch.s_hat_h)?;
    let r_o = alpha_o
        .iter()
        .zip(&patch.s_hat_o)
        .map(|(a, s)| image_interactiveness(a, s))
        .collect::<Result<Vec<_>>>()?;
    let r_ho = r_o
        .iter()
        .map(|&r| pairwise_interactiveness(r_h, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(InteractivenessReport { r_h, r_o, r_ho })
}
