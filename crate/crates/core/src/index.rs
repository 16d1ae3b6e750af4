//! Mode sets and sparse (signed) multi-index algebra.
//!
//! Modes are integer Fourier sites `j` in the truncation window `[-m_max, m_max]`.
//! Tangential sites are the powers of two `1, 2, 4, ..., 2^h_max`; every other site
//! in the window (including 0 and the negatives) is normal. Multi-indices are kept
//! sparse and canonically sorted by mode so that equality, hashing and ordering are
//! structural.

use crate::error::{Error, Result};
use std::fmt;

pub type Mode = i32;

/// The weight base `max(2, |j|)` used by all mode-weighted norms.
pub fn weight_base(j: Mode) -> f64 {
    j.unsigned_abs().max(2) as f64
}

/// Truncated set of Fourier sites split into tangential and normal parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSet {
    tangential: Vec<Mode>,
    normal: Vec<Mode>,
    h_max: u32,
    m_max: i32,
}

impl ModeSet {
    pub fn new(h_max: u32, m_max: i32) -> Result<Self> {
        if m_max < 1 {
            return Err(Error::EmptyModeSet(m_max));
        }
        let span = 1i64 << h_max;
        if span > m_max as i64 {
            return Err(Error::TangentialSpanExceedsTruncation { h_max, m_max });
        }
        let tangential: Vec<Mode> = (0..=h_max).map(|h| 1 << h).collect();
        let normal: Vec<Mode> = (-m_max..=m_max)
            .filter(|j| !is_power_of_two_site(*j, h_max))
            .collect();
        Ok(Self {
            tangential,
            normal,
            h_max,
            m_max,
        })
    }

    /// Default truncation: tangential sites {1, 2, 4, 8, 16} inside [-16, 16].
    pub fn default_truncation() -> Self {
        Self::new(4, 16).expect("default truncation is valid")
    }

    pub fn h_max(&self) -> u32 {
        self.h_max
    }

    pub fn m_max(&self) -> i32 {
        self.m_max
    }

    pub fn tangential(&self) -> &[Mode] {
        &self.tangential
    }

    pub fn normal(&self) -> &[Mode] {
        &self.normal
    }

    /// All sites in ascending order.
    pub fn modes(&self) -> impl Iterator<Item = Mode> + '_ {
        -self.m_max..=self.m_max
    }

    pub fn len(&self) -> usize {
        (2 * self.m_max + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, j: Mode) -> bool {
        j.abs() <= self.m_max
    }

    pub fn is_tangential(&self, j: Mode) -> bool {
        is_power_of_two_site(j, self.h_max)
    }

    pub fn is_normal(&self, j: Mode) -> bool {
        self.contains(j) && !self.is_tangential(j)
    }

    /// Position of `j` in the ascending `modes()` ordering.
    pub fn site_index(&self, j: Mode) -> Option<usize> {
        if self.contains(j) {
            Some((j + self.m_max) as usize)
        } else {
            None
        }
    }

    /// For a tangential site `2^h`, the exponent `h`.
    pub fn tangential_exponent(&self, j: Mode) -> Option<u32> {
        if self.is_tangential(j) {
            Some(j.trailing_zeros())
        } else {
            None
        }
    }

    pub fn check_mode(&self, j: Mode) -> Result<()> {
        if self.contains(j) {
            Ok(())
        } else {
            Err(Error::ModeOutsideSet {
                mode: j,
                m_max: self.m_max,
            })
        }
    }
}

fn is_power_of_two_site(j: Mode, h_max: u32) -> bool {
    j > 0 && (j & (j - 1)) == 0 && (j as i64) <= (1i64 << h_max)
}

/// Sparse multi-index with nonnegative exponents, sorted by mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MultiIndex {
    entries: Vec<(Mode, u32)>,
}

impl MultiIndex {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds from arbitrary (mode, exponent) pairs: merges duplicates, drops zeros.
    pub fn from_pairs(pairs: &[(Mode, u32)]) -> Self {
        let mut entries: Vec<(Mode, u32)> = Vec::with_capacity(pairs.len());
        let mut sorted = pairs.to_vec();
        sorted.sort_by_key(|(j, _)| *j);
        for (j, e) in sorted {
            if e == 0 {
                continue;
            }
            match entries.last_mut() {
                Some((last, acc)) if *last == j => *acc += e,
                _ => entries.push((j, e)),
            }
        }
        Self { entries }
    }

    /// Validating constructor: every touched mode must lie in the set.
    pub fn new(mode_set: &ModeSet, pairs: &[(Mode, u32)]) -> Result<Self> {
        for (j, e) in pairs {
            if *e > 0 {
                mode_set.check_mode(*j)?;
            }
        }
        Ok(Self::from_pairs(pairs))
    }

    pub fn unit(j: Mode) -> Self {
        Self {
            entries: vec![(j, 1)],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Mode, u32)> + '_ {
        self.entries.iter().copied()
    }

    pub fn exponent(&self, j: Mode) -> u32 {
        self.entries
            .binary_search_by_key(&j, |(m, _)| *m)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }

    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    /// Total degree `sum_j alpha_j` (the index mass).
    pub fn total(&self) -> u32 {
        self.entries.iter().map(|(_, e)| e).sum()
    }

    /// First moment `sum_j j * alpha_j`.
    pub fn momentum(&self) -> i64 {
        self.entries
            .iter()
            .map(|(j, e)| (*j as i64) * (*e as i64))
            .sum()
    }

    /// Second moment `sum_j j^2 * alpha_j`.
    pub fn quad_moment(&self) -> i64 {
        self.entries
            .iter()
            .map(|(j, e)| (*j as i64) * (*j as i64) * (*e as i64))
            .sum()
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut entries = Vec::with_capacity(self.entries.len() + other.entries.len());
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        loop {
            match (a.peek(), b.peek()) {
                (Some((ja, ea)), Some((jb, eb))) => {
                    if ja < jb {
                        entries.push((*ja, *ea));
                        a.next();
                    } else if jb < ja {
                        entries.push((*jb, *eb));
                        b.next();
                    } else {
                        entries.push((*ja, ea + eb));
                        a.next();
                        b.next();
                    }
                }
                (Some(&&e), None) => {
                    entries.push(e);
                    a.next();
                }
                (None, Some(&&e)) => {
                    entries.push(e);
                    b.next();
                }
                (None, None) => break,
            }
        }
        Self { entries }
    }

    /// Subtracts one unit from mode `j`; None if `j` is absent.
    pub fn sub_unit(&self, j: Mode) -> Option<Self> {
        let pos = self.entries.binary_search_by_key(&j, |(m, _)| *m).ok()?;
        let mut entries = self.entries.clone();
        if entries[pos].1 == 1 {
            entries.remove(pos);
        } else {
            entries[pos].1 -= 1;
        }
        Some(Self { entries })
    }

    /// Signed difference `self - other`.
    pub fn signed_difference(&self, other: &Self) -> SignedIndexVector {
        let pairs: Vec<(Mode, i64)> = self
            .entries
            .iter()
            .map(|(j, e)| (*j, *e as i64))
            .chain(other.entries.iter().map(|(j, e)| (*j, -(*e as i64))))
            .collect();
        SignedIndexVector::from_pairs(&pairs)
    }

    /// Splits into (tangential, normal) parts relative to a mode set.
    pub fn split(&self, mode_set: &ModeSet) -> (Self, Self) {
        let mut tang = Vec::new();
        let mut norm = Vec::new();
        for &(j, e) in &self.entries {
            if mode_set.is_tangential(j) {
                tang.push((j, e));
            } else {
                norm.push((j, e));
            }
        }
        (Self { entries: tang }, Self { entries: norm })
    }

    /// Product of factorials of the exponents, as f64.
    pub fn factorial(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, e)| (1..=*e).map(|k| k as f64).product::<f64>())
            .product()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (j, e)) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{j}:{e}")?;
        }
        write!(f, "}}")
    }
}

/// Sparse integer vector (a difference of multi-indices), sorted by mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SignedIndexVector {
    entries: Vec<(Mode, i64)>,
}

impl SignedIndexVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: &[(Mode, i64)]) -> Self {
        let mut sorted = pairs.to_vec();
        sorted.sort_by_key(|(j, _)| *j);
        let mut entries: Vec<(Mode, i64)> = Vec::with_capacity(sorted.len());
        for (j, c) in sorted {
            match entries.last_mut() {
                Some((last, acc)) if *last == j => *acc += c,
                _ => entries.push((j, c)),
            }
        }
        entries.retain(|(_, c)| *c != 0);
        Self { entries }
    }

    pub fn unit(j: Mode) -> Self {
        Self {
            entries: vec![(j, 1)],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Mode, i64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn get(&self, j: Mode) -> i64 {
        self.entries
            .binary_search_by_key(&j, |(m, _)| *m)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }

    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    /// `|l| = sum_j |l_j|`.
    pub fn one_norm(&self) -> i64 {
        self.entries.iter().map(|(_, c)| c.abs()).sum()
    }

    /// `sum_j l_j`.
    pub fn mass(&self) -> i64 {
        self.entries.iter().map(|(_, c)| c).sum()
    }

    /// `sum_j j * l_j`.
    pub fn momentum(&self) -> i64 {
        self.entries.iter().map(|(j, c)| (*j as i64) * c).sum()
    }

    /// `sum_j j^2 * l_j`.
    pub fn quad_moment(&self) -> i64 {
        self.entries
            .iter()
            .map(|(j, c)| (*j as i64) * (*j as i64) * c)
            .sum()
    }

    pub fn add(&self, other: &Self) -> Self {
        let pairs: Vec<(Mode, i64)> = self
            .entries
            .iter()
            .chain(other.entries.iter())
            .copied()
            .collect();
        Self::from_pairs(&pairs)
    }

    pub fn negate(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|(j, c)| (*j, -c)).collect(),
        }
    }

    pub fn scale(&self, k: i64) -> Self {
        if k == 0 {
            return Self::zero();
        }
        Self {
            entries: self.entries.iter().map(|(j, c)| (*j, c * k)).collect(),
        }
    }

    /// Decomposes into `(positive part, negative part)` with `self = plus - minus`.
    pub fn decompose(&self) -> (MultiIndex, MultiIndex) {
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for &(j, c) in &self.entries {
            if c > 0 {
                plus.push((j, c as u32));
            } else {
                minus.push((j, (-c) as u32));
            }
        }
        (MultiIndex::from_pairs(&plus), MultiIndex::from_pairs(&minus))
    }

    /// Restriction to the tangential sites of a mode set.
    pub fn tangential_part(&self, mode_set: &ModeSet) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(j, _)| mode_set.is_tangential(*j))
                .copied()
                .collect(),
        }
    }

    /// Restriction to the normal sites of a mode set.
    pub fn normal_part(&self, mode_set: &ModeSet) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(j, _)| !mode_set.is_tangential(*j))
                .copied()
                .collect(),
        }
    }
}

impl fmt::Display for SignedIndexVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return write!(f, "0");
        }
        for (i, (j, c)) in self.entries.iter().enumerate() {
            let sign = if *c >= 0 { "+" } else { "-" };
            if i > 0 || *c < 0 {
                write!(f, "{sign}")?;
            }
            let a = c.abs();
            if a != 1 {
                write!(f, "{a}")?;
            }
            write!(f, "e({j})")?;
        }
        Ok(())
    }
}

/// Two multi-indices form an admissible monomial pair when their total degrees
/// match and their momenta agree.
pub fn is_admissible_pair(alpha: &MultiIndex, beta: &MultiIndex) -> bool {
    alpha.total() == beta.total() && alpha.momentum() == beta.momentum()
}
