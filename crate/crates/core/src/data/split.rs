use rand::seq::SliceRandom;
use rand::Rng;

use super::Example;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotSplit {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Per class: shuffle, keep the first `shots` for training, the last
/// `test_per_class` (capped so that at least one example is left for
/// validation) for testing and the rest for validation.
pub fn few_shot_split<R: Rng>(
    target: &[Example],
    num_classes: usize,
    shots: usize,
    test_per_class: usize,
    rng: &mut R,
) -> Result<FewShotSplit> {
    if shots == 0 {
        return Err(Error::config("shots", "must be at least 1"));
    }
    if test_per_class == 0 {
        return Err(Error::config("test_per_class", "must be at least 1"));
    }
    let mut by_class: Vec<Vec<&Example>> = vec![Vec::new(); num_classes];
    for e in target {
        let slot = by_class
            .get_mut(e.label)
            .ok_or_else(|| Error::Data(format!("label {} is not below {num_classes}", e.label)))?;
        slot.push(e);
    }
    let mut split = FewShotSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (k, mut items) in by_class.into_iter().enumerate() {
        let n = items.len();
        if n < shots + 2 {
            return Err(Error::Data(format!(
                "class {k} has {n} target examples; {shots}-shot splitting needs at least {}",
                shots + 2
            )));
        }
        items.shuffle(rng);
        let test = test_per_class.min(n - shots - 1);
        split.train.extend(items[..shots].iter().map(|e| (*e).clone()));
        split.valid.extend(items[shots..n - test].iter().map(|e| (*e).clone()));
        split.test.extend(items[n - test..].iter().map(|e| (*e).clone()));
    }
    Ok(split)
}
