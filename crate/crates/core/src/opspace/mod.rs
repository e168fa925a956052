//! Candidate operations, their naming grammar, and search spaces.
//!
//! Op names follow `<family>_k<kernel>_d<dilation>[_e<expansion>]`, e.g.
//! `ir_k3_d2_e6`, `sep_k5_d1`, `conv_k3_d3`. The identity op is `skip`.

mod block;

pub use block::{build_block, Block, ConvUnit};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpFamily {
    InvertedResidual,
    Separable,
    Conv,
    Skip,
}

impl OpFamily {
    pub fn prefix(self) -> &'static str {
        match self {
            OpFamily::InvertedResidual => "ir",
            OpFamily::Separable => "sep",
            OpFamily::Conv => "conv",
            OpFamily::Skip => "skip",
        }
    }
}

pub const KERNELS: [u32; 3] = [3, 5, 7];
pub const DILATIONS: [u32; 3] = [1, 2, 3];
pub const EXPANSIONS: [u32; 3] = [1, 3, 6];

/// One candidate operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct OpSpec {
    pub family: OpFamily,
    pub kernel: u32,
    pub dilation: u32,
    /// Only set for the inverted-residual family.
    pub expansion: Option<u32>,
    /// Group count of the conv family; 1 everywhere in the catalogue.
    pub groups: u32,
}

impl OpSpec {
    pub const fn ir(kernel: u32, dilation: u32, expansion: u32) -> Self {
        Self {
            family: OpFamily::InvertedResidual,
            kernel,
            dilation,
            expansion: Some(expansion),
            groups: 1,
        }
    }

    pub const fn sep(kernel: u32, dilation: u32) -> Self {
        Self {
            family: OpFamily::Separable,
            kernel,
            dilation,
            expansion: None,
            groups: 1,
        }
    }

    pub const fn conv(kernel: u32, dilation: u32) -> Self {
        Self {
            family: OpFamily::Conv,
            kernel,
            dilation,
            expansion: None,
            groups: 1,
        }
    }

    pub const fn skip() -> Self {
        Self {
            family: OpFamily::Skip,
            kernel: 1,
            dilation: 1,
            expansion: None,
            groups: 1,
        }
    }

    pub fn canonical_name(&self) -> String {
        match self.family {
            OpFamily::Skip => "skip".to_string(),
            OpFamily::InvertedResidual => format!(
                "ir_k{}_d{}_e{}",
                self.kernel,
                self.dilation,
                self.expansion.unwrap_or(1)
            ),
            f => format!("{}_k{}_d{}", f.prefix(), self.kernel, self.dilation),
        }
    }

    /// Position in the full catalogue, if the op belongs to it.
    pub fn catalogue_index(&self) -> Option<usize> {
        CATALOGUE.iter().position(|c| c == self)
    }
}

impl fmt::Display for OpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_name())
    }
}

impl FromStr for OpSpec {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_opname(s)
    }
}

impl TryFrom<String> for OpSpec {
    type Error = ParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        parse_opname(&s)
    }
}

impl From<OpSpec> for String {
    fn from(op: OpSpec) -> Self {
        op.canonical_name()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse op name {input:?} at byte {position}: {message}")]
pub struct ParseError {
    pub input: String,
    pub position: usize,
    pub message: String,
}

fn perr(input: &str, position: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        input: input.to_string(),
        position,
        message: message.into(),
    }
}

/// Reads `_<tag><digits>` starting at `pos`; returns the value and the new position.
fn field(input: &str, pos: usize, tag: char, allowed: &[u32]) -> Result<(u32, usize), ParseError> {
    let rest = &input[pos..];
    let mut chars = rest.char_indices();
    match chars.next() {
        Some((_, '_')) => {}
        _ => return Err(perr(input, pos, format!("expected '_{tag}'"))),
    }
    match chars.next() {
        Some((_, c)) if c == tag => {}
        _ => return Err(perr(input, pos + 1, format!("expected '{tag}'"))),
    }
    let digits_start = pos + 2;
    let len = input[digits_start..]
        .bytes()
        .take_while(|b| b.is_ascii_digit())
        .count();
    if len == 0 {
        return Err(perr(input, digits_start, "expected digits"));
    }
    let value: u32 = input[digits_start..digits_start + len]
        .parse()
        .map_err(|_| perr(input, digits_start, "number out of range"))?;
    if !allowed.contains(&value) {
        return Err(perr(
            input,
            digits_start,
            format!("{tag}{value} not in {allowed:?}"),
        ));
    }
    Ok((value, digits_start + len))
}

/// Parses a canonical op name.
pub fn parse_opname(name: &str) -> Result<OpSpec, ParseError> {
    if name == "skip" {
        return Ok(OpSpec::skip());
    }
    let fam_len = name.find('_').unwrap_or(name.len());
    let family = match &name[..fam_len] {
        "ir" => OpFamily::InvertedResidual,
        "sep" => OpFamily::Separable,
        "conv" => OpFamily::Conv,
        other => return Err(perr(name, 0, format!("unknown family {other:?}"))),
    };
    let (kernel, pos) = field(name, fam_len, 'k', &KERNELS)?;
    let (dilation, pos) = field(name, pos, 'd', &DILATIONS)?;
    let (expansion, pos) = if family == OpFamily::InvertedResidual {
        let (e, p) = field(name, pos, 'e', &EXPANSIONS)?;
        (Some(e), p)
    } else {
        (None, pos)
    };
    if pos != name.len() {
        return Err(perr(name, pos, "trailing characters"));
    }
    Ok(OpSpec {
        family,
        kernel,
        dilation,
        expansion,
        groups: 1,
    })
}

/// The 32 candidates, in listing order. Column `i` of a whole-space
/// architecture matrix refers to `CATALOGUE[i]`.
pub const CATALOGUE: [OpSpec; 32] = [
    OpSpec::ir(3, 1, 1),
    OpSpec::ir(3, 1, 3),
    OpSpec::ir(3, 1, 6),
    OpSpec::ir(3, 2, 1),
    OpSpec::ir(3, 2, 3),
    OpSpec::ir(3, 2, 6),
    OpSpec::ir(3, 3, 1),
    OpSpec::ir(3, 3, 3),
    OpSpec::ir(3, 3, 6),
    OpSpec::ir(5, 1, 1),
    OpSpec::ir(5, 1, 3),
    OpSpec::ir(5, 1, 6),
    OpSpec::ir(5, 2, 1),
    OpSpec::ir(5, 2, 3),
    OpSpec::ir(5, 2, 6),
    OpSpec::ir(5, 3, 1),
    OpSpec::ir(5, 3, 3),
    OpSpec::ir(5, 3, 6),
    OpSpec::ir(7, 1, 1),
    OpSpec::ir(7, 1, 6),
    OpSpec::sep(3, 1),
    OpSpec::sep(3, 2),
    OpSpec::sep(3, 3),
    OpSpec::sep(5, 1),
    OpSpec::sep(5, 2),
    OpSpec::sep(5, 3),
    OpSpec::conv(3, 1),
    OpSpec::conv(3, 2),
    OpSpec::conv(3, 3),
    OpSpec::conv(5, 1),
    OpSpec::conv(5, 2),
    OpSpec::conv(5, 3),
];

/// Published backbone sub space, verbatim. `ir_k5_d1_e3` is listed twice.
pub const APPENDIX_BACKBONE: [&str; 8] = [
    "ir_k3_d1_e3",
    "ir_k3_d1_e6",
    "ir_k3_d2_e3",
    "ir_k5_d1_e3",
    "ir_k5_d1_e3",
    "ir_k5_d2_e6",
    "ir_k5_d3_e6",
    "ir_k7_d1_e6",
];

pub const APPENDIX_NECK: [&str; 8] = [
    "conv_k3_d3",
    "conv_k5_d1",
    "ir_k3_d2_e1",
    "ir_k5_d1_e3",
    "sep_k3_d1",
    "sep_k3_d3",
    "sep_k5_d2",
    "sep_k5_d3",
];

pub const APPENDIX_HEAD: [&str; 8] = [
    "ir_k3_d1_e3",
    "ir_k3_d1_e6",
    "ir_k3_d2_e6",
    "ir_k5_d1_e3",
    "ir_k5_d1_e6",
    "ir_k7_d1_e6",
    "conv_k3_d1",
    "conv_k5_d1",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Backbone,
    Neck,
    Head,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Backbone, Component::Neck, Component::Head];

    pub fn name(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Neck => "neck",
            Component::Head => "head",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "backbone" => Ok(Component::Backbone),
            "neck" => Ok(Component::Neck),
            "head" => Ok(Component::Head),
            other => Err(format!("unknown component {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceTag {
    Backbone,
    Neck,
    Head,
    Whole,
}

impl SpaceTag {
    pub fn name(self) -> &'static str {
        match self {
            SpaceTag::Backbone => "backbone",
            SpaceTag::Neck => "neck",
            SpaceTag::Head => "head",
            SpaceTag::Whole => "whole",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(SpaceTag::Backbone),
            "neck" => Some(SpaceTag::Neck),
            "head" => Some(SpaceTag::Head),
            "whole" => Some(SpaceTag::Whole),
            _ => None,
        }
    }
}

impl From<Component> for SpaceTag {
    fn from(c: Component) -> Self {
        match c {
            Component::Backbone => SpaceTag::Backbone,
            Component::Neck => SpaceTag::Neck,
            Component::Head => SpaceTag::Head,
        }
    }
}

/// Ordered set of candidates for one component (or the whole catalogue).
/// Ops are kept in catalogue order; ops outside the catalogue (`skip`) sort last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub tag: SpaceTag,
    ops: Vec<OpSpec>,
}

fn rank(op: &OpSpec) -> usize {
    op.catalogue_index().unwrap_or(CATALOGUE.len())
}

impl SearchSpace {
    /// Fails on duplicates or an empty list.
    pub fn new(tag: SpaceTag, mut ops: Vec<OpSpec>) -> Result<Self, String> {
        if ops.is_empty() {
            return Err(format!("{} space is empty", tag.name()));
        }
        ops.sort_by_key(rank);
        for w in ops.windows(2) {
            if w[0] == w[1] {
                return Err(format!("duplicate op {} in {} space", w[0], tag.name()));
            }
        }
        Ok(Self { tag, ops })
    }

    /// Builds a space from a listing, dropping repeated names. The dropped
    /// names are returned so callers can flag them.
    pub fn from_listing(tag: SpaceTag, names: &[&str]) -> Result<(Self, Vec<String>), ParseError> {
        let mut ops: Vec<OpSpec> = Vec::new();
        let mut dups = Vec::new();
        for n in names {
            let op = parse_opname(n)?;
            if ops.contains(&op) {
                dups.push(n.to_string());
            } else {
                ops.push(op);
            }
        }
        let space = Self::new(tag, ops).map_err(|m| perr(&names.join(" "), 0, m))?;
        Ok((space, dups))
    }

    pub fn ops(&self) -> &[OpSpec] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Removes and returns the op at `idx`; refuses to empty the space.
    pub fn remove(&mut self, idx: usize) -> Result<OpSpec, String> {
        if self.ops.len() <= 1 {
            return Err(format!("cannot empty the {} space", self.tag.name()));
        }
        Ok(self.ops.remove(idx))
    }

    pub fn position(&self, op: &OpSpec) -> Option<usize> {
        self.ops.iter().position(|o| o == op)
    }

    pub fn names(&self) -> Vec<String> {
        self.ops.iter().map(OpSpec::canonical_name).collect()
    }

    /// `tag: op op op`
    pub fn to_line(&self) -> String {
        format!("{}: {}", self.tag.name(), self.names().join(" "))
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let (tag, rest) = line
            .split_once(':')
            .ok_or_else(|| format!("expected '<tag>: <ops>' in {line:?}"))?;
        let tag = SpaceTag::parse(tag.trim()).ok_or_else(|| format!("unknown space tag {tag:?}"))?;
        let ops = rest
            .split_whitespace()
            .map(parse_opname)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        Self::new(tag, ops)
    }
}

/// All 32 candidates.
pub fn full_catalogue() -> SearchSpace {
    SearchSpace {
        tag: SpaceTag::Whole,
        ops: CATALOGUE.to_vec(),
    }
}

pub fn catalogue_for(tag: SpaceTag) -> SearchSpace {
    SearchSpace {
        tag,
        ops: CATALOGUE.to_vec(),
    }
}

/// The published backbone sub space (7 unique ops) and its repeated entry.
pub fn appendix_backbone() -> (SearchSpace, Vec<String>) {
    SearchSpace::from_listing(SpaceTag::Backbone, &APPENDIX_BACKBONE).expect("fixture parses")
}

pub fn appendix_neck() -> SearchSpace {
    SearchSpace::from_listing(SpaceTag::Neck, &APPENDIX_NECK)
        .expect("fixture parses")
        .0
}

pub fn appendix_head() -> SearchSpace {
    SearchSpace::from_listing(SpaceTag::Head, &APPENDIX_HEAD)
        .expect("fixture parses")
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogue_has_32_unique_entries() {
        let cat = full_catalogue();
        assert_eq!(cat.len(), 32);
        let mut names = cat.names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 32);
        assert!(cat.names().contains(&"ir_k7_d1_e6".to_string()));
        assert!(cat.names().contains(&"conv_k5_d3".to_string()));
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_opname("ir_k5_d2_e6").unwrap(), OpSpec::ir(5, 2, 6));
        let sep = parse_opname("sep_k3_d3").unwrap();
        assert_eq!(sep, OpSpec::sep(3, 3));
        assert_eq!(sep.expansion, None);
        let err = parse_opname("ir_k9_d1_e6").unwrap_err();
        assert_eq!(err.position, 4);
    }

    #[test]
    fn parse_errors_carry_position() {
        assert_eq!(parse_opname("res_k3_d1").unwrap_err().position, 0);
        assert_eq!(parse_opname("sep_k3").unwrap_err().position, 6);
        assert_eq!(parse_opname("sep_k3_d1_e3").unwrap_err().position, 9);
        assert_eq!(parse_opname("ir_k3_d1").unwrap_err().position, 8);
        assert_eq!(parse_opname("conv_kx_d1").unwrap_err().position, 6);
    }

    #[test]
    fn round_trip_catalogue() {
        for op in CATALOGUE {
            assert_eq!(parse_opname(&op.canonical_name()).unwrap(), op);
        }
        assert_eq!(parse_opname("skip").unwrap(), OpSpec::skip());
    }

    #[test]
    fn appendix_backbone_duplicate_is_flagged() {
        let (space, dups) = appendix_backbone();
        assert_eq!(space.len(), 7);
        assert_eq!(dups, vec!["ir_k5_d1_e3".to_string()]);
    }

    #[test]
    fn appendix_spaces_are_catalogue_members() {
        for space in [appendix_backbone().0, appendix_neck(), appendix_head()] {
            assert!(space.ops().iter().all(|o| o.catalogue_index().is_some()));
        }
        assert_eq!(appendix_neck().len(), 8);
        assert_eq!(appendix_head().len(), 8);
    }

    #[test]
    fn space_line_round_trip() {
        let s = appendix_head();
        let line = s.to_line();
        assert_eq!(SearchSpace::parse_line(&line).unwrap().to_line(), line);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(SearchSpace::new(SpaceTag::Neck, vec![OpSpec::sep(3, 1), OpSpec::sep(3, 1)]).is_err());
    }
}
