use ndarray::{ArrayBase, ArrayView2, Array2, Data, Dimension, Zip};

use crate::error::{Error, Result};

/// Foreground where `sigmoid(logit) >= threshold`, boundary inclusive.
pub fn binarize_logits(logits: ArrayView2<'_, f32>, threshold: f64) -> Array2<u8> {
    logits.mapv(|l| u8::from(sigmoid(l as f64) >= threshold))
}

pub fn binarize_probabilities(probs: ArrayView2<'_, f32>, threshold: f64) -> Array2<u8> {
    probs.mapv(|p| u8::from(p as f64 >= threshold))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pixel counts of a mask pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub a: u64,
    pub b: u64,
}

impl Overlap {
    pub fn of<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<Self>
    where
        S1: Data<Elem = u8>,
        S2: Data<Elem = u8>,
        D: Dimension,
    {
        if a.shape() != b.shape() {
            return Err(Error::shape("mask pair", a.shape(), b.shape()));
        }
        let mut o = Overlap::default();
        Zip::from(a).and(b).for_each(|&x, &y| {
            let (x, y) = (x != 0, y != 0);
            o.a += x as u64;
            o.b += y as u64;
            o.intersection += (x && y) as u64;
        });
        Ok(o)
    }

    pub fn merge(self, other: Overlap) -> Overlap {
        Overlap {
            intersection: self.intersection + other.intersection,
            a: self.a + other.a,
            b: self.b + other.b,
        }
    }

    pub fn dice(&self) -> f64 {
        let denom = self.a + self.b;
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.intersection as f64 / denom as f64
    }

    pub fn iou(&self) -> f64 {
        let union = self.a + self.b - self.intersection;
        if union == 0 {
            return 1.0;
        }
        self.intersection as f64 / union as f64
    }
}

/// `2|a & b| / (|a| + |b|)`; two empty masks score 1.
pub fn dice<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = u8>,
    S2: Data<Elem = u8>,
    D: Dimension,
{
    Ok(Overlap::of(a, b)?.dice())
}

/// `|a & b| / |a | b|`; two empty masks score 1.
pub fn iou<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = u8>,
    S2: Data<Elem = u8>,
    D: Dimension,
{
    Ok(Overlap::of(a, b)?.iou())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;

    #[test]
    fn binarize_conventions() {
        let l = arr2(&[[0.0f32, -10.0], [10.0, -0.1]]);
        assert_eq!(binarize_logits(l.view(), 0.5), arr2(&[[1, 0], [1, 0]]));
        assert!(binarize_logits(l.view(), 0.0).iter().all(|&v| v == 1));
        let neg = Array2::<f32>::from_elem((4, 4), -10.0);
        assert!(binarize_logits(neg.view(), 0.5).iter().all(|&v| v == 0));
        let p = arr2(&[[0.5f32, 0.49]]);
        assert_eq!(binarize_probabilities(p.view(), 0.5), arr2(&[[1, 0]]));
    }

    #[test]
    fn worked_counts() {
        let a = arr2(&[[1u8, 1, 1, 1, 0, 0]]);
        let b = arr2(&[[0u8, 0, 1, 1, 1, 1]]);
        assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = arr2(&[[0u8, 0, 0, 0, 1, 1]]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let e = Array2::<u8>::zeros((1, 6));
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(dice(&a, &Array2::<u8>::zeros((2, 3))).is_err());
    }

    #[test]
    fn volumetric_counts() {
        let mut a = Array3::<u8>::zeros((2, 3, 3));
        a[[0, 1, 1]] = 1;
        a[[1, 1, 1]] = 1;
        let mut b = a.clone();
        b[[1, 1, 1]] = 0;
        assert!((dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    fn masks() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (
            prop::collection::vec(0u8..2, 64),
            prop::collection::vec(0u8..2, 64),
        )
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_related((x, y) in masks()) {
            let a = Array2::from_shape_vec((8, 8), x).unwrap();
            let b = Array2::from_shape_vec((8, 8), y).unwrap();
            let d = dice(&a, &b).unwrap();
            let j = iou(&a, &b).unwrap();
            prop_assert_eq!(d, dice(&b, &a).unwrap());
            prop_assert_eq!(j, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
            prop_assert!(d >= j);
            prop_assert!((j - d / (2.0 - d)).abs() < 1e-15);
        }
    }
}
