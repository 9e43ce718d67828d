use super::{CorpusError, CorpusManifest, VideoAsset};

/// Lowercased alphanumeric runs of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Assets whose caption contains any of `keywords` as a whole-token
/// sequence, case-insensitively. Results keep manifest order.
pub fn search_by_keywords<'m, S: AsRef<str>>(
    keywords: &[S],
    manifest: &'m CorpusManifest,
) -> Result<Vec<&'m VideoAsset>, CorpusError> {
    if keywords.is_empty() {
        return Err(CorpusError::InvalidKeywords("keyword list is empty".into()));
    }
    let mut needles = Vec::with_capacity(keywords.len());
    for k in keywords {
        let k = k.as_ref();
        let toks = tokenize(k);
        if toks.is_empty() {
            return Err(CorpusError::InvalidKeywords(format!("keyword {k:?} has no searchable tokens")));
        }
        needles.push(toks);
    }
    Ok(manifest
        .entries
        .iter()
        .filter(|asset| {
            let caption = tokenize(&asset.caption);
            needles.iter().any(|n| contains_run(&caption, n))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn asset(id: &str, caption: &str) -> VideoAsset {
        VideoAsset {
            id: id.into(),
            uploader_id: "u".into(),
            posted_at: 0,
            duration: 5.0,
            caption: caption.into(),
            frame_source_ref: id.into(),
        }
    }

    fn manifest(caps: &[&str]) -> CorpusManifest {
        let entries = caps
            .iter()
            .enumerate()
            .map(|(i, c)| asset(&format!("v{i}"), c))
            .collect();
        CorpusManifest::from_entries(entries, "mem").unwrap()
    }

    // Reference matcher: scan every token offset by hand.
    fn brute_match(caption: &str, keyword: &str) -> bool {
        let lower: String = caption
            .chars()
            .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap() } else { ' ' })
            .collect();
        let kw: String = keyword
            .chars()
            .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap() } else { ' ' })
            .collect();
        let ct: Vec<&str> = lower.split_whitespace().collect();
        let kt: Vec<&str> = kw.split_whitespace().collect();
        if kt.is_empty() || kt.len() > ct.len() {
            return false;
        }
        (0..=ct.len() - kt.len()).any(|s| (0..kt.len()).all(|j| ct[s + j] == kt[j]))
    }

    #[test]
    fn whole_token_case_insensitive() {
        let m = manifest(&["Magic hour!", "card TRICKS", "majestic"]);
        let hits: Vec<_> = search_by_keywords(&["magic", "tricks"], &m)
            .unwrap()
            .into_iter()
            .map(|a| a.id.as_str())
            .collect();
        assert_eq!(hits, ["v0", "v1"]);
        for cap in ["Magic hour!", "card TRICKS", "majestic"] {
            let expected = brute_match(cap, "magic") || brute_match(cap, "tricks");
            assert_eq!(!search_by_keywords(&["magic", "tricks"], &manifest(&[cap])).unwrap().is_empty(), expected);
        }
    }

    #[test]
    fn multi_word_keyword_and_short_tokens() {
        let m = manifest(&["sound on asmr", "on sound", "magma", "my ma is great", "I'm done!!"]);
        let ids = |kw: &[&str]| -> Vec<String> {
            search_by_keywords(kw, &m).unwrap().into_iter().map(|a| a.id.clone()).collect()
        };
        assert_eq!(ids(&["asmr"]), ["v0"]);
        assert_eq!(ids(&["sound on"]), ["v0"]);
        assert_eq!(ids(&["ma"]), ["v3"]);
        assert_eq!(ids(&["i'm done"]), ["v4"]);
    }

    #[test]
    fn empty_inputs() {
        let empty = CorpusManifest::default();
        assert!(search_by_keywords(&["x"], &empty).unwrap().is_empty());
        assert!(matches!(
            search_by_keywords::<&str>(&[], &empty),
            Err(CorpusError::InvalidKeywords(_))
        ));
        assert!(search_by_keywords(&["  "], &empty).is_err());
    }

    proptest! {
        #[test]
        fn result_is_subset_and_order_independent(
            caps in proptest::collection::vec("[a-cA-C !,]{0,12}", 0..20),
            kw in "[a-c]{1,2}( [a-c]{1,2})?",
        ) {
            let refs: Vec<&str> = caps.iter().map(String::as_str).collect();
            let m = manifest(&refs);
            let hits: Vec<String> = search_by_keywords(&[&kw], &m).unwrap().iter().map(|a| a.id.clone()).collect();
            for h in &hits {
                prop_assert!(m.get(h).is_some());
            }
            for a in &m.entries {
                prop_assert_eq!(hits.contains(&a.id), brute_match(&a.caption, &kw));
            }
            let mut rev = m.entries.clone();
            rev.reverse();
            let m2 = CorpusManifest::from_entries(rev, "mem").unwrap();
            let mut hits2: Vec<String> = search_by_keywords(&[&kw], &m2).unwrap().iter().map(|a| a.id.clone()).collect();
            let mut hits1 = hits.clone();
            hits1.sort();
            hits2.sort();
            prop_assert_eq!(hits1, hits2);
        }
    }
}
