use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Offsets `(dr, dc)` of a flat structuring element, origin included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    offsets: Vec<(isize, isize)>,
}

impl StructuringElement {
    /// Full `side x side` square centred on the origin. `side` must be odd.
    pub fn square(side: usize) -> Self {
        assert!(side % 2 == 1, "square element needs an odd side");
        let r = (side / 2) as isize;
        let offsets = (-r..=r)
            .flat_map(|dr| (-r..=r).map(move |dc| (dr, dc)))
            .collect();
        Self { offsets }
    }

    /// Symmetric element from explicit offsets; the origin is always added.
    pub fn from_offsets(offsets: impl IntoIterator<Item = (isize, isize)>) -> Self {
        let mut offsets: Vec<_> = offsets.into_iter().collect();
        let mirrored: Vec<_> = offsets.iter().map(|&(r, c)| (-r, -c)).collect();
        offsets.extend(mirrored);
        offsets.push((0, 0));
        offsets.sort_unstable();
        offsets.dedup();
        Self { offsets }
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square(3)
    }
}

/// `outside` is the value assumed for pixels beyond the image border.
fn sweep(m: ArrayView2<'_, u8>, k: &StructuringElement, outside: bool, erode: bool) -> Array2<u8> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut hits = k.offsets().iter().map(|&(dr, dc)| {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                outside
            } else {
                m[[rr as usize, cc as usize]] != 0
            }
        });
        let v = if erode {
            hits.all(|x| x)
        } else {
            hits.any(|x| x)
        };
        u8::from(v)
    })
}

/// Erosion with out-of-image pixels counted as background.
pub fn erode(m: ArrayView2<'_, u8>, k: &StructuringElement) -> Array2<u8> {
    sweep(m, k, false, true)
}

pub fn dilate(m: ArrayView2<'_, u8>, k: &StructuringElement) -> Array2<u8> {
    sweep(m, k, false, false)
}

/// Erosion followed by dilation. Removes specks smaller than the element.
pub fn morph_open(m: ArrayView2<'_, u8>, k: &StructuringElement) -> Array2<u8> {
    dilate(erode(m, k).view(), k)
}

/// Dilation followed by erosion. Fills holes smaller than the element.
///
/// Runs on a background margin as wide as the element, so structure that
/// dilation pushes past the border is still there for the erosion and the
/// result never loses foreground.
pub fn morph_close(m: ArrayView2<'_, u8>, k: &StructuringElement) -> Array2<u8> {
    let r = k
        .offsets()
        .iter()
        .map(|&(dr, dc)| dr.unsigned_abs().max(dc.unsigned_abs()))
        .max()
        .unwrap_or(0);
    let (h, w) = m.dim();
    let mut padded = Array2::<u8>::zeros((h + 2 * r, w + 2 * r));
    padded.slice_mut(s![r..r + h, r..r + w]).assign(&m);
    let closed = erode(dilate(padded.view(), k).view(), k);
    closed.slice(s![r..r + h, r..r + w]).to_owned()
}

/// Opening then closing with the default 3x3 square.
pub fn postprocess_baseline(m: ArrayView2<'_, u8>) -> Array2<u8> {
    let k = StructuringElement::default();
    morph_close(morph_open(m, &k).view(), &k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> StructuringElement {
        StructuringElement::default()
    }

    #[test]
    fn speck_removed_and_hole_filled() {
        let mut m = Array2::<u8>::zeros((12, 12));
        m[[1, 10]] = 1;
        let opened = morph_open(m.view(), &k());
        assert!(opened.iter().all(|&v| v == 0));

        let mut block = Array2::<u8>::zeros((12, 12));
        block.slice_mut(ndarray::s![3..10, 3..10]).fill(1);
        let mut holed = block.clone();
        holed[[6, 6]] = 0;
        assert_eq!(morph_close(holed.view(), &k()), block);

        let mut both = holed.clone();
        both[[0, 11]] = 1;
        assert_eq!(postprocess_baseline(both.view()), block);
        assert_eq!(postprocess_baseline(block.view()), block);
    }

    #[test]
    fn flat_masks() {
        let ones = Array2::<u8>::ones((6, 7));
        assert_eq!(morph_open(ones.view(), &k()), ones);
        assert_eq!(morph_close(ones.view(), &k()), ones);
        let zeros = Array2::<u8>::zeros((6, 7));
        assert_eq!(morph_close(zeros.view(), &k()), zeros);
        assert_eq!(morph_open(zeros.view(), &k()), zeros);
        // erosion treats the border as background
        let e = erode(ones.view(), &k());
        assert_eq!(e.sum() as usize, 4 * 5);
    }

    #[test]
    fn custom_element() {
        let cross = StructuringElement::from_offsets([(0, 1), (1, 0)]);
        assert_eq!(cross.offsets().len(), 5);
        let mut m = Array2::<u8>::zeros((5, 5));
        m[[2, 2]] = 1;
        assert_eq!(dilate(m.view(), &cross).sum(), 5);
    }

    fn mask() -> impl Strategy<Value = Array2<u8>> {
        prop::collection::vec(prop::bool::weighted(0.5), 16 * 16)
            .prop_map(|v| Array2::from_shape_vec((16, 16), v.into_iter().map(u8::from).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn order_properties(m in mask()) {
            let o = morph_open(m.view(), &k());
            let c = morph_close(m.view(), &k());
            for ((&a, &b), &x) in o.iter().zip(c.iter()).zip(m.iter()) {
                prop_assert!(a <= x && x <= b);
            }
            prop_assert_eq!(morph_open(o.view(), &k()), o.clone());
            prop_assert_eq!(morph_close(c.view(), &k()), c.clone());
        }
    }
}
