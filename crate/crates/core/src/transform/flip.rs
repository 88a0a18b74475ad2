use std::path::Path;

use crate::error::{Error, Result};

const PAIRS_68: &str = include_str!("../../data/flip_pairs_68.txt");
const PAIRS_5: &str = include_str!("../../data/flip_pairs_5.txt");

/// Parses "i j" lines into a full permutation over `n` indices; indices not
/// listed map to themselves.
pub fn parse_flip_pairs(text: &str, n: usize, source: &str) -> Result<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: no + 1,
            msg,
        };
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| err(format!("invalid index `{s}`"))))
            .collect::<Result<_>>()?;
        let [a, b] = nums[..] else {
            return Err(err(format!("expected two indices, found {}", nums.len())));
        };
        if a >= n || b >= n {
            return Err(err(format!("index out of range for {n} landmarks")));
        }
        perm[a] = b;
        perm[b] = a;
    }
    validate_flip_pairs(&perm)?;
    Ok(perm)
}

pub fn validate_flip_pairs(perm: &[usize]) -> Result<()> {
    for (i, &j) in perm.iter().enumerate() {
        if j >= perm.len() || perm[j] != i {
            return Err(Error::config(format!("flip pairs are not an involution at index {i}")));
        }
    }
    Ok(())
}

pub fn load_flip_pairs(path: &Path, n: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_flip_pairs(&text, n, &path.display().to_string())
}

/// Mirror pairing of the 68-point iBUG markup.
pub fn flip_pairs_68() -> Vec<usize> {
    parse_flip_pairs(PAIRS_68, 68, "flip_pairs_68.txt").expect("bundled table is valid")
}

/// Mirror pairing of the 5-point layout: eyes (0, 1), nose 2, mouth corners (3, 4).
pub fn flip_pairs_5() -> Vec<usize> {
    parse_flip_pairs(PAIRS_5, 5, "flip_pairs_5.txt").expect("bundled table is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_tables_are_involutions() {
        let p = flip_pairs_68();
        assert_eq!(p[36], 45);
        assert_eq!(p[8], 8);
        assert_eq!(p[48], 54);
        assert_eq!(p.iter().enumerate().filter(|(i, j)| i == *j).count(), 10);
        assert_eq!(flip_pairs_5(), vec![1, 0, 2, 4, 3]);
    }

    #[test]
    fn malformed_lines_are_reported() {
        assert!(matches!(parse_flip_pairs("0 1\n2\n", 3, "x"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_flip_pairs("0 9\n", 3, "x").is_err());
        // 0<->1 then 1<->2 leaves 0 -> 1 -> 2: not an involution.
        assert!(parse_flip_pairs("0 1\n1 2\n", 3, "x").is_err());
    }
}
