use std::collections::{BTreeMap, HashMap};

use super::{FilterVerdict, R1Config, RemovalReason};
use crate::corpus::VideoAsset;

/// Keeps one video per uploader per posting window.
///
/// Per uploader, videos are taken in `(posted_at, id)` order. The first one is
/// kept and every later video posted at or before `keeper + dedup_window` is
/// dropped; the first video past the window becomes the next keeper.
///
/// Returns kept assets in input order and one verdict per input, also in
/// input order.
pub fn dedup_sessions(assets: &[VideoAsset], cfg: &R1Config) -> (Vec<VideoAsset>, Vec<FilterVerdict>) {
    let mut by_uploader: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, a) in assets.iter().enumerate() {
        by_uploader.entry(a.uploader_id.as_str()).or_default().push(i);
    }

    // keeper posted_at for each dropped index
    let mut dropped: HashMap<usize, i64> = HashMap::new();
    for idxs in by_uploader.values_mut() {
        idxs.sort_by(|&a, &b| {
            assets[a]
                .posted_at
                .cmp(&assets[b].posted_at)
                .then_with(|| assets[a].id.cmp(&assets[b].id))
        });
        let mut keeper: Option<i64> = None;
        for &i in idxs.iter() {
            let t = assets[i].posted_at;
            match keeper {
                Some(k) if (t - k) as f64 <= cfg.dedup_window => {
                    dropped.insert(i, k);
                }
                _ => keeper = Some(t),
            }
        }
    }

    let mut kept = Vec::with_capacity(assets.len() - dropped.len());
    let verdicts = assets
        .iter()
        .enumerate()
        .map(|(i, a)| match dropped.get(&i) {
            Some(&k) => FilterVerdict::removed(
                &a.id,
                RemovalReason::SameSessionDuplicate,
                BTreeMap::from([("session_keeper_posted_at".to_string(), k as f64)]),
            ),
            None => {
                kept.push(a.clone());
                FilterVerdict::kept(&a.id, BTreeMap::new())
            }
        })
        .collect();
    (kept, verdicts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn post(id: &str, uploader: &str, t: i64) -> VideoAsset {
        VideoAsset {
            id: id.into(),
            uploader_id: uploader.into(),
            posted_at: t,
            duration: 10.0,
            caption: String::new(),
            frame_source_ref: String::new(),
        }
    }

    fn kept_ids(assets: &[VideoAsset]) -> Vec<String> {
        dedup_sessions(assets, &R1Config::default())
            .0
            .into_iter()
            .map(|a| a.id)
            .collect()
    }

    #[test]
    fn window_rule() {
        let xs = [post("a", "A", 0), post("b", "A", 60), post("c", "A", 130)];
        assert_eq!(kept_ids(&xs), ["a", "c"]);
        let (_, v) = dedup_sessions(&xs, &R1Config::default());
        assert_eq!(v[1].reason, RemovalReason::SameSessionDuplicate);
    }

    #[test]
    fn distinct_uploaders_all_kept() {
        let xs = [post("a", "A", 0), post("b", "B", 1), post("c", "C", 2)];
        assert_eq!(kept_ids(&xs), ["a", "b", "c"]);
    }

    #[test]
    fn boundary_inclusive() {
        assert_eq!(kept_ids(&[post("a", "A", 0), post("b", "A", 120)]), ["a"]);
        assert_eq!(kept_ids(&[post("a", "A", 0), post("b", "A", 121)]), ["a", "b"]);
    }

    #[test]
    fn windows_chain_from_keepers_only() {
        // 100 is dropped (within a's window); 200 is past a's window so it
        // starts a new session even though it is within 120 s of 100.
        let xs = [post("a", "A", 0), post("b", "A", 100), post("c", "A", 200), post("d", "A", 300)];
        assert_eq!(kept_ids(&xs), ["a", "c"]);
    }

    #[test]
    fn ties_broken_by_id() {
        let xs = [post("z", "A", 5), post("m", "A", 5)];
        assert_eq!(kept_ids(&xs), ["m"]);
    }

    proptest! {
        #[test]
        fn input_order_does_not_matter(
            posts in proptest::collection::vec((0u8..3, 0i64..600), 0..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let xs: Vec<VideoAsset> = posts
                .iter()
                .enumerate()
                .map(|(i, (u, t))| post(&format!("v{i}"), &format!("u{u}"), *t))
                .collect();
            let mut shuffled = xs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut a = kept_ids(&xs);
            let mut b = kept_ids(&shuffled);
            a.sort();
            b.sort();
            prop_assert_eq!(&a, &b);
            // re-running on the kept set changes nothing
            let kept: Vec<VideoAsset> = xs.iter().filter(|x| a.contains(&x.id)).cloned().collect();
            let mut again = kept_ids(&kept);
            again.sort();
            prop_assert_eq!(a, again);
        }
    }
}
