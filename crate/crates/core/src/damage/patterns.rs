use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowering::SparsityPatternSet;
use crate::net::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternName {
    Center1,
    Center2Horizontal,
    Center2Vertical,
    Block1x3H,
    Block1x3V,
    Cross3x3,
    Square3x3In5x5,
    Diamond3x3In5x5,
    Full,
}

impl PatternName {
    pub const ALL: [PatternName; 9] = [
        PatternName::Center1,
        PatternName::Center2Horizontal,
        PatternName::Center2Vertical,
        PatternName::Block1x3H,
        PatternName::Block1x3V,
        PatternName::Cross3x3,
        PatternName::Square3x3In5x5,
        PatternName::Diamond3x3In5x5,
        PatternName::Full,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PatternName::Center1 => "center1",
            PatternName::Center2Horizontal => "center2_horizontal",
            PatternName::Center2Vertical => "center2_vertical",
            PatternName::Block1x3H => "block_1x3_h",
            PatternName::Block1x3V => "block_1x3_v",
            PatternName::Cross3x3 => "cross_3x3",
            PatternName::Square3x3In5x5 => "square_3x3_in_5x5",
            PatternName::Diamond3x3In5x5 => "diamond_3x3_in_5x5",
            PatternName::Full => "full",
        }
    }

    /// Live offsets relative to the kernel center, as `(di, dj)` with `i` the row.
    fn offsets(&self) -> Vec<(isize, isize)> {
        let box3 = || (-1isize..=1).flat_map(|a| (-1isize..=1).map(move |b| (a, b)));
        match self {
            PatternName::Center1 => vec![(0, 0)],
            PatternName::Center2Horizontal => vec![(0, 0), (0, 1)],
            PatternName::Center2Vertical => vec![(0, 0), (1, 0)],
            PatternName::Block1x3H => vec![(0, -1), (0, 0), (0, 1)],
            PatternName::Block1x3V => vec![(-1, 0), (0, 0), (1, 0)],
            PatternName::Cross3x3 => box3().filter(|(a, b)| a.abs() + b.abs() <= 1).collect(),
            PatternName::Square3x3In5x5 => box3().collect(),
            PatternName::Diamond3x3In5x5 => (-2..=2)
                .flat_map(|a| (-2..=2).map(move |b| (a, b)))
                .filter(|(a, b): &(isize, isize)| a.abs() + b.abs() <= 2)
                .collect(),
            PatternName::Full => Vec::new(),
        }
    }

    fn required_d(&self) -> Option<usize> {
        match self {
            PatternName::Square3x3In5x5 | PatternName::Diamond3x3In5x5 => Some(5),
            _ => None,
        }
    }
}

impl fmt::Display for PatternName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatternName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatternName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown pattern `{s}`")))
    }
}

/// A named centered shape placed in a `d × d` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredefinedPattern {
    pub name: PatternName,
    pub d: usize,
}

impl PredefinedPattern {
    pub fn new(name: PatternName, d: usize) -> Self {
        PredefinedPattern { name, d }
    }

    /// Single `d × d` mask, row-major.
    pub fn mask(&self) -> Result<Vec<bool>> {
        let d = self.d;
        if d == 0 || d.is_multiple_of(2) {
            return Err(Error::input(format!("pattern needs an odd kernel side, got d={d}")));
        }
        if let Some(req) = self.name.required_d() {
            if d != req {
                return Err(Error::input(format!(
                    "pattern {} is defined for d={req}, got d={d}",
                    self.name
                )));
            }
        }
        if self.name == PatternName::Full {
            return Ok(vec![true; d * d]);
        }
        let c = (d / 2) as isize;
        let mut mask = vec![false; d * d];
        for (di, dj) in self.name.offsets() {
            let (i, j) = (c + di, c + dj);
            if i < 0 || j < 0 || i >= d as isize || j >= d as isize {
                return Err(Error::input(format!("pattern {} does not fit d={d}", self.name)));
            }
            mask[i as usize * d + j as usize] = true;
        }
        Ok(mask)
    }
}

/// The pattern's mask replicated over all `in_maps` input maps.
pub fn make_predefined_pattern(p: &PredefinedPattern, in_maps: usize) -> Result<SparsityPatternSet> {
    SparsityPatternSet::replicated(p.d, in_maps, &p.mask()?)
}

/// One pattern set per convolution of `net`, in layer order, all using `name`.
pub fn patterns_for_network(net: &Network, name: PatternName) -> Result<Vec<SparsityPatternSet>> {
    net.conv_indices()
        .into_iter()
        .map(|idx| {
            let g = &net.conv(idx).expect("conv index").geometry;
            make_predefined_pattern(&PredefinedPattern::new(name, g.d), g.in_maps)
        })
        .collect()
}
