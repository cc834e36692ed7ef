//! Row-major run-length encoding for binary masks. `counts` alternates runs
//! of zeros and ones, starting with zeros (a leading 0 count is allowed).

use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    /// [height, width]
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn encode(mask: &Mask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for &b in &mask.bits {
        if b == current {
            run += 1;
        } else {
            counts.push(run);
            current = b;
            run = 1;
        }
    }
    counts.push(run);
    RleMask { size: [mask.height, mask.width], counts }
}

pub fn decode(rle: &RleMask) -> Result<Mask> {
    let (h, w) = (rle.size[0], rle.size[1]);
    let total: usize = rle.counts.iter().sum();
    if total != w * h {
        return Err(Error::validation(format!(
            "rle covers {total} pixels, mask has {}",
            w * h
        )));
    }
    let mut bits = Vec::with_capacity(w * h);
    let mut value = false;
    for &c in &rle.counts {
        bits.extend(std::iter::repeat(value).take(c));
        value = !value;
    }
    Ok(Mask { width: w, height: h, bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_and_full() {
        let empty = Mask::empty(4, 3);
        let rle = encode(&empty);
        assert_eq!(rle.counts, vec![12]);
        assert_eq!(decode(&rle).unwrap(), empty);

        let full = Mask { width: 4, height: 3, bits: vec![true; 12] };
        let rle = encode(&full);
        assert_eq!(rle.counts, vec![0, 12]);
        assert_eq!(decode(&rle).unwrap(), full);
    }

    #[test]
    fn bad_total_rejected() {
        let rle = RleMask { size: [2, 2], counts: vec![3] };
        assert!(decode(&rle).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(bits in proptest::collection::vec(any::<bool>(), 1..200)) {
            let w = bits.len();
            let mask = Mask { width: w, height: 1, bits };
            let rle = encode(&mask);
            prop_assert_eq!(decode(&rle).unwrap(), mask);
        }
    }
}
