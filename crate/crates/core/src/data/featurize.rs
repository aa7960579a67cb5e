use crate::error::{Error, Result};

use super::{LabelSpace, RawRecord, Sample};

pub const MIN_FEATURE_DIM: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Signed hashed bag of lowercase alphanumeric tokens, L2-normalized.
/// Text without tokens maps to the zero vector.
pub fn featurize_text(fields: &[String], dim: usize) -> Result<Vec<f64>> {
    if dim < MIN_FEATURE_DIM {
        return Err(Error::InvalidParameter(format!(
            "feature dimension must be at least {MIN_FEATURE_DIM}, got {dim}"
        )));
    }
    let mut v = vec![0.0; dim];
    for field in fields {
        let lower = field.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let h = fnv1a(token.as_bytes());
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

/// Builds a [`Sample`]; records carrying `features` keep them verbatim.
pub fn featurize(record: &RawRecord, dim: usize, labels: &LabelSpace) -> Result<Sample> {
    let label = labels.index_of(&record.label_name).ok_or_else(|| {
        Error::InvalidInput(format!(
            "sample {}: label {:?} not in label space",
            record.id, record.label_name
        ))
    })?;
    let features = match &record.features {
        Some(f) => f.clone(),
        None => featurize_text(&record.text_fields, dim)?,
    };
    Ok(Sample {
        id: record.id.clone(),
        features,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn text(s: &str) -> Vec<String> {
        vec![s.to_string()]
    }

    #[test]
    fn deterministic_and_order_free() {
        let a = featurize_text(&text("one third"), 16).unwrap();
        let b = featurize_text(&text("third one"), 16).unwrap();
        let c = featurize_text(&text("One, THIRD!"), 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a, featurize_text(&text("one third"), 16).unwrap());
    }

    #[test]
    fn no_tokens_gives_zero_vector() {
        assert_eq!(featurize_text(&text("  ?!/ -- "), 8).unwrap(), vec![0.0; 8]);
        assert_eq!(featurize_text(&[], 8).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn small_dimension_is_rejected() {
        assert!(featurize_text(&text("x"), 7).is_err());
    }

    #[test]
    fn precomputed_features_pass_through() {
        let labels = LabelSpace::new(vec!["a".into(), "b".into()]).unwrap();
        let r = RawRecord {
            id: "s".into(),
            text_fields: vec![],
            label_name: "b".into(),
            meta: Default::default(),
            features: Some(vec![0.5, -1.0]),
        };
        let s = featurize(&r, 8, &labels).unwrap();
        assert_eq!(s.features, vec![0.5, -1.0]);
        assert_eq!(s.label, 1);
    }

    proptest! {
        #[test]
        fn norm_is_zero_or_one(s in "[a-zA-Z0-9 ,.]{0,60}", dim in 8usize..64) {
            let v = featurize_text(&[s], dim).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }
}
