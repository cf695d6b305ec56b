use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::lattice::{Lattice, LatticeError, LatticeRegion, ScalarField};

use super::{fit_meta, EffectField, MetaError, MetaFit, MetaOptions, StudyPoint};

pub type MetaAt = Option<Result<MetaFit, MetaError>>;

#[derive(Debug, Clone, PartialEq)]
pub struct MetaField {
    pub lattice: Lattice,
    pub mask: LatticeRegion,
    pub fits: Vec<MetaAt>,
}

impl MetaField {
    pub fn map(&self, f: impl Fn(&MetaFit) -> f64) -> ScalarField {
        let v = self
            .fits
            .iter()
            .map(|x| match x {
                Some(Ok(m)) => f(m),
                _ => f64::NAN,
            })
            .collect();
        ScalarField::new(self.lattice, v).expect("one value per lattice point")
    }

    /// Lattice index of the largest adjusted t of `coefficient`.
    pub fn argmax_t(&self, coefficient: usize) -> Option<usize> {
        self.fits
            .iter()
            .enumerate()
            .filter_map(|(i, f)| match f {
                Some(Ok(m)) if !m.t_adjusted[coefficient].is_nan() => Some((i, m.t_adjusted[coefficient])),
                _ => None,
            })
            .fold(None, |best: Option<(usize, f64)>, (i, t)| match best {
                Some((_, bt)) if bt >= t => best,
                _ => Some((i, t)),
            })
            .map(|(i, _)| i)
    }
}

/// Meta-regression at every point masked in all subject fields. Rows of `x`
/// follow the order of `fields`.
pub fn meta_field(fields: &[EffectField], x: &DMatrix<f64>, options: &MetaOptions) -> Result<MetaField, MetaError> {
    let first = fields.first().ok_or(MetaError::Empty)?;
    if x.nrows() != fields.len() {
        return Err(MetaError::DimensionMismatch {
            rows: x.nrows(),
            k: fields.len(),
        });
    }
    let mut mask = first.mask.clone();
    for f in &fields[1..] {
        if f.lattice != first.lattice {
            return Err(LatticeError::LatticeMismatch.into());
        }
        mask = mask.intersection(&f.mask)?;
    }
    let fits = (0..first.lattice.len())
        .into_par_iter()
        .map(|i| {
            if !mask.contains(i) {
                return None;
            }
            let points: Result<Vec<StudyPoint>, MetaError> = fields
                .iter()
                .enumerate()
                .map(|(s, f)| f.effect(i).map(StudyPoint::from).ok_or(MetaError::MissingSubject { subject: s }))
                .collect();
            Some(points.and_then(|p| fit_meta(&p, x, options)))
        })
        .collect();
    Ok(MetaField {
        lattice: first.lattice,
        mask,
        fits,
    })
}
