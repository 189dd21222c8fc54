//! Cross-subject and cross-view evaluation splits.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    CrossSubject,
    CrossView,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::CrossSubject => "cross_subject",
            Protocol::CrossView => "cross_view",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_subject" => Ok(Protocol::CrossSubject),
            "cross_view" => Ok(Protocol::CrossView),
            other => Err(Error::config(format!(
                "unknown protocol {other:?} (expected cross_subject or cross_view)"
            ))),
        }
    }
}

/// View zeroed in cross-view test grids (0-based, i.e. the second view).
pub const CROSS_VIEW_MASKED: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// View whose tokens are zeroed at test time.
    pub masked_view: Option<usize>,
}

/// Partitions sample ids given `(id, subject)` pairs.
///
/// Cross-subject holds out the highest `max(1, n_subjects / 4)` subject ids.
/// Cross-view tests on ids with `id % 4 == 3`, with the second view masked.
pub fn make_splits(
    samples: impl IntoIterator<Item = (usize, usize)>,
    views: usize,
    protocol: Protocol,
) -> Result<Split> {
    let samples: Vec<(usize, usize)> = samples.into_iter().collect();
    let (train, test, masked_view) = match protocol {
        Protocol::CrossSubject => {
            let subjects: BTreeSet<usize> = samples.iter().map(|&(_, s)| s).collect();
            if subjects.len() < 2 {
                return Err(Error::config(format!(
                    "cross_subject needs at least 2 subjects, found {}",
                    subjects.len()
                )));
            }
            let n_hold = (subjects.len() / 4).max(1);
            let held: BTreeSet<usize> = subjects.iter().rev().take(n_hold).copied().collect();
            let (test, train): (Vec<_>, Vec<_>) = samples.iter().partition(|(_, s)| held.contains(s));
            (train, test, None)
        }
        Protocol::CrossView => {
            if views < 2 {
                return Err(Error::config(format!(
                    "cross_view needs at least 2 views, found {views}"
                )));
            }
            let (test, train): (Vec<_>, Vec<_>) = samples.iter().partition(|(id, _)| id % 4 == 3);
            (train, test, Some(CROSS_VIEW_MASKED))
        }
    };
    let ids = |v: Vec<&(usize, usize)>| v.into_iter().map(|&(id, _)| id).collect::<Vec<_>>();
    let (train, test) = (ids(train), ids(test));
    if train.is_empty() || test.is_empty() {
        return Err(Error::config(format!("{protocol} split leaves an empty partition")));
    }
    Ok(Split {
        train,
        test,
        masked_view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(n: usize, subjects: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, i % subjects)).collect()
    }

    #[test]
    fn cross_subject_holds_out_top_subjects() {
        let s = make_splits(samples(40, 4), 3, Protocol::CrossSubject).unwrap();
        assert!(s.test.iter().all(|id| id % 4 == 3));
        assert!(s.train.iter().all(|id| id % 4 != 3));
        assert_eq!(s.masked_view, None);
        let s = make_splits(samples(100, 10), 3, Protocol::CrossSubject).unwrap();
        assert!(s.test.iter().all(|id| id % 10 >= 8));
    }

    #[test]
    fn partitions_are_disjoint_and_complete() {
        for protocol in [Protocol::CrossSubject, Protocol::CrossView] {
            let s = make_splits(samples(37, 5), 3, protocol).unwrap();
            let train: BTreeSet<_> = s.train.iter().copied().collect();
            let test: BTreeSet<_> = s.test.iter().copied().collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(train.len() + test.len(), 37);
        }
    }

    #[test]
    fn insufficient_groups_rejected() {
        assert!(matches!(
            make_splits(samples(10, 1), 3, Protocol::CrossSubject),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_splits(samples(10, 3), 1, Protocol::CrossView),
            Err(Error::Config(_))
        ));
        assert_eq!(
            make_splits(samples(10, 3), 2, Protocol::CrossView).unwrap().masked_view,
            Some(1)
        );
        assert!("cross_scene".parse::<Protocol>().is_err());
    }
}
