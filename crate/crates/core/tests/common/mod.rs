//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use contourlab::contour::{Contour, ContourSequence};
use contourlab::pipeline::{PairSample, PairScheme};

/// `recs` recordings of `per` back-to-back contours with distinct values.
pub fn grid_corpus(recs: usize, per: usize) -> Vec<ContourSequence> {
    (0..recs)
        .map(|r| {
            let id = format!("rec{r}");
            ContourSequence {
                recording_id: id.clone(),
                contours: (0..per)
                    .map(|i| Contour {
                        recording_id: id.clone(),
                        start_frame: 100 * i,
                        valid_length: 100,
                        values_cents: (0..100).map(|k| (1000 * r + 10 * i + k % 7) as f64).collect(),
                        values_hz: vec![220.0; 100],
                    })
                    .collect(),
            }
        })
        .collect()
}

fn oracle_label(scheme: PairScheme, a: &Contour, b: &Contour) -> usize {
    let same = a.recording_id == b.recording_id;
    let gap = a.start_frame as i64 - b.start_frame as i64;
    match scheme {
        PairScheme::File => usize::from(same),
        PairScheme::Contiguous => usize::from(same && (gap == 100 || gap == -100)),
    }
}

fn in_corpus(corpus: &[ContourSequence], c: &Contour) -> bool {
    corpus
        .iter()
        .flat_map(|s| &s.contours)
        .any(|k| k == c)
}

/// Checks every label against recomputation from ids and start frames, and
/// the positive/negative-type quotas for a request of `n` pairs.
pub fn check_pairs(
    pairs: &[PairSample],
    scheme: PairScheme,
    corpus: &[ContourSequence],
    n: usize,
) -> Result<(), String> {
    if pairs.len() != n {
        return Err(format!("asked for {n} pairs, got {}", pairs.len()));
    }
    let (mut pos, mut same_neg, mut cross_neg) = (0, 0, 0);
    for (k, p) in pairs.iter().enumerate() {
        if !in_corpus(corpus, &p.a) || !in_corpus(corpus, &p.b) {
            return Err(format!("pair {k} holds a contour not in the corpus"));
        }
        if p.scheme != scheme {
            return Err(format!("pair {k} has scheme {:?}", p.scheme));
        }
        let y = oracle_label(scheme, &p.a, &p.b);
        if y != p.label {
            return Err(format!("pair {k}: stored label {}, oracle {y}", p.label));
        }
        let same = p.a.recording_id == p.b.recording_id;
        if same && p.a.start_frame == p.b.start_frame {
            return Err(format!("pair {k} pairs a contour with itself"));
        }
        match (y, same) {
            (1, _) => {
                pos += 1;
                if scheme == PairScheme::Contiguous && p.a.start_frame > p.b.start_frame {
                    return Err(format!("positive {k} is not ordered earlier-first"));
                }
            }
            (_, true) => same_neg += 1,
            (_, false) => cross_neg += 1,
        }
    }
    let want_pos = n.div_ceil(2);
    let neg = n - want_pos;
    let want = match scheme {
        PairScheme::File => (want_pos, 0, neg),
        PairScheme::Contiguous => (want_pos, neg / 2, neg - neg / 2),
    };
    if (pos, same_neg, cross_neg) != want {
        return Err(format!(
            "quotas (pos, same-file neg, cross-file neg) = {:?}, expected {want:?}",
            (pos, same_neg, cross_neg)
        ));
    }
    Ok(())
}

/// Every consecutive window by brute force over start frames.
pub fn all_triples(corpus: &[ContourSequence]) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for s in corpus {
        for c in &s.contours {
            let has = |d: usize| s.contours.iter().any(|k| k.start_frame == c.start_frame + d);
            if has(100) && has(200) {
                out.push((s.recording_id.clone(), c.start_frame));
            }
        }
    }
    out
}
