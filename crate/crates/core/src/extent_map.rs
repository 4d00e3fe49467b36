//! A file's ordered, non-overlapping list of extent keys.

use crate::types::ExtentKey;

/// Inserts `key`, replacing whatever it overlaps. Returns the displaced
/// fragments so their storage can be released.
pub fn insert(keys: &mut Vec<ExtentKey>, key: ExtentKey) -> Vec<ExtentKey> {
    if key.size == 0 {
        return Vec::new();
    }
    let (start, end) = (key.file_offset, key.file_end());
    let mut out = Vec::with_capacity(keys.len() + 2);
    let mut displaced = Vec::new();
    for k in keys.drain(..) {
        if k.file_end() <= start || k.file_offset >= end {
            out.push(k);
            continue;
        }
        if let Some(left) = k.slice(k.file_offset, start) {
            out.push(left);
        }
        if let Some(mid) = k.slice(start, end) {
            displaced.push(mid);
        }
        if let Some(right) = k.slice(end, k.file_end()) {
            out.push(right);
        }
    }
    let pos = out.partition_point(|k| k.file_offset < start);
    out.insert(pos, key);
    *keys = coalesce(out);
    displaced
}

/// Merges neighbours that are contiguous both in the file and in the extent.
fn coalesce(keys: Vec<ExtentKey>) -> Vec<ExtentKey> {
    let mut out: Vec<ExtentKey> = Vec::with_capacity(keys.len());
    for k in keys {
        if let Some(last) = out.last_mut() {
            if last.partition_id == k.partition_id
                && last.extent_id == k.extent_id
                && last.file_end() == k.file_offset
                && last.extent_offset + last.size == k.extent_offset
            {
                last.size += k.size;
                continue;
            }
        }
        out.push(k);
    }
    out
}

pub fn end_offset(keys: &[ExtentKey]) -> u64 {
    keys.last().map_or(0, |k| k.file_end())
}

/// A contiguous part of a requested file range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Piece {
    Mapped(ExtentKey),
    Gap { file_offset: u64, len: u64 },
}

/// Splits `[start, end)` into mapped slices and unmapped gaps, in order.
pub fn pieces(keys: &[ExtentKey], start: u64, end: u64) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut cursor = start;
    let first = keys.partition_point(|k| k.file_end() <= start);
    for k in &keys[first..] {
        if k.file_offset >= end {
            break;
        }
        if k.file_offset > cursor {
            out.push(Piece::Gap { file_offset: cursor, len: k.file_offset - cursor });
        }
        if let Some(s) = k.slice(cursor, end) {
            cursor = s.file_end();
            out.push(Piece::Mapped(s));
        }
    }
    if cursor < end {
        out.push(Piece::Gap { file_offset: cursor, len: end - cursor });
    }
    out
}

/// Checks ordering and non-overlap.
pub fn is_well_formed(keys: &[ExtentKey]) -> bool {
    keys.iter().all(|k| k.size > 0) && keys.windows(2).all(|w| w[0].file_end() <= w[1].file_offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(p: u64, e: u64, eo: u64, size: u64, fo: u64) -> ExtentKey {
        ExtentKey { partition_id: p, extent_id: e, extent_offset: eo, size, file_offset: fo }
    }

    #[test]
    fn contiguous_appends_coalesce() {
        let mut keys = Vec::new();
        insert(&mut keys, key(1, 1, 0, 10, 0));
        insert(&mut keys, key(1, 1, 10, 10, 10));
        assert_eq!(keys, vec![key(1, 1, 0, 20, 0)]);
        insert(&mut keys, key(2, 5, 0, 5, 20));
        assert_eq!(keys.len(), 2);
        assert_eq!(end_offset(&keys), 25);
    }

    #[test]
    fn overlapping_insert_splits_and_reports_displaced() {
        let mut keys = vec![key(1, 1, 0, 100, 0)];
        let displaced = insert(&mut keys, key(2, 9, 0, 10, 40));
        assert_eq!(displaced, vec![key(1, 1, 40, 10, 40)]);
        assert_eq!(keys, vec![key(1, 1, 0, 40, 0), key(2, 9, 0, 10, 40), key(1, 1, 50, 50, 50)]);
    }

    #[test]
    fn pieces_report_gaps() {
        let keys = vec![key(1, 1, 0, 10, 10)];
        assert_eq!(
            pieces(&keys, 0, 30),
            vec![
                Piece::Gap { file_offset: 0, len: 10 },
                Piece::Mapped(key(1, 1, 0, 10, 10)),
                Piece::Gap { file_offset: 20, len: 10 }
            ]
        );
        assert_eq!(pieces(&keys, 12, 15), vec![Piece::Mapped(key(1, 1, 2, 3, 12))]);
    }

    proptest! {
        // Resolving every byte through the map must agree with a flat array
        // that records which insert last covered it.
        #[test]
        fn map_agrees_with_flat_model(ops in proptest::collection::vec((0u64..200, 1u64..60), 1..40)) {
            let mut keys = Vec::new();
            let mut flat: Vec<Option<(u64, u64)>> = vec![None; 300];
            for (i, (off, len)) in ops.iter().enumerate() {
                let k = key(1, i as u64, 1000, *len, *off);
                insert(&mut keys, k);
                for b in *off..off + len {
                    flat[b as usize] = Some((i as u64, 1000 + b - off));
                }
            }
            prop_assert!(is_well_formed(&keys));
            for (b, want) in flat.iter().enumerate() {
                let got = pieces(&keys, b as u64, b as u64 + 1).into_iter().find_map(|p| match p {
                    Piece::Mapped(k) => Some((k.extent_id, k.extent_offset)),
                    Piece::Gap { .. } => None,
                });
                prop_assert_eq!(got, *want);
            }
        }
    }
}
