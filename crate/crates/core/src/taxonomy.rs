//! Hierarchical terrain-class codes such as `A-G2-T1-L2-N1-F2f`.
//!
//! Grammar (case-sensitive, fixed segment order):
//!
//! ```text
//! code      := bedrock | floatrock | loose | nonrocky
//! bedrock   := "A-G" [12] "-T" [12] "-L" [1-3] "-N" [1-3] "-" fracture
//! fracture  := "F1" | "F" [23] ("u" | "f")?
//! floatrock := "B1-G" [12] "-T" [12]
//! loose     := "C" [1-3]
//! nonrocky  := "D" [1-4]
//! ```
//!
//! Class identity is the registry `class_id`; several expert classes share a
//! code and differ only in their free-text description.

use std::collections::HashSet;
use std::fmt;

pub const GRAMMAR_JSON: &str = include_str!("../data/taxonomy-grammar.json");
const BUILTIN_CLASSES: &str = include_str!("../data/classes.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Grain {
    /// G1
    Visible,
    /// G2
    NotVisible,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tone {
    /// T1, light-toned / red
    Light,
    /// T2, dark-toned / gray
    Dark,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lamination {
    None,
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Nodules {
    None,
    CommonRaised,
    Pervasive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fill {
    Unfilled,
    Filled,
}

/// Fracture grade. Only fractured rock can carry a fill suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fracture {
    /// F1
    None,
    /// F2 with optional fill
    Common(Option<Fill>),
    /// F3 with optional fill
    Pervasive(Option<Fill>),
}

impl Fracture {
    pub fn fill(self) -> Option<Fill> {
        match self {
            Fracture::None => None,
            Fracture::Common(f) | Fracture::Pervasive(f) => f,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TopLevel {
    Bedrock,
    Floatrock,
    Unconsolidated,
    NonRocky,
}

/// A parsed taxonomy code. Each variant carries exactly the attributes its
/// top-level category allows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaxonomyCode {
    Bedrock {
        grain: Grain,
        tone: Tone,
        lamination: Lamination,
        nodules: Nodules,
        fracture: Fracture,
    },
    Floatrock {
        /// Always 1 (massive) in the current grammar.
        form: u8,
        grain: Grain,
        tone: Tone,
    },
    /// C1..C3
    Unconsolidated { kind: u8 },
    /// D1..D4
    NonRocky { kind: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    UnknownCategory,
    /// A known attribute appeared where a different one was expected.
    WrongOrder { expected: char },
    Missing { expected: char },
    OutOfRange { max: u8 },
    FillAfterUnfractured,
    Malformed,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Empty => write!(f, "empty code"),
            ParseErrorKind::UnknownCategory => write!(f, "top-level category must be A, B, C or D"),
            ParseErrorKind::WrongOrder { expected } => {
                write!(f, "segments out of order, expected {expected}")
            }
            ParseErrorKind::Missing { expected } => write!(f, "missing segment {expected}"),
            ParseErrorKind::OutOfRange { max } => write!(f, "digit must be 1..={max}"),
            ParseErrorKind::FillAfterUnfractured => {
                write!(f, "fill suffix is only allowed after F2 or F3")
            }
            ParseErrorKind::Malformed => write!(f, "malformed segment"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("segment {segment:?} at byte {offset}: {kind}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// The `-`-delimited segment containing the fault.
    pub segment: String,
    /// Byte offset where that segment starts.
    pub offset: usize,
}

struct Parser<'s> {
    src: &'s str,
    bytes: &'s [u8],
    pos: usize,
    seg_start: usize,
}

const ATTRIBUTE_LETTERS: &[u8] = b"GTLNF";

impl<'s> Parser<'s> {
    fn new(src: &'s str) -> Self {
        Self {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            seg_start: 0,
        }
    }

    fn fail(&self, kind: ParseErrorKind) -> ParseError {
        let start = self.seg_start.min(self.bytes.len());
        let end = self.bytes[start..]
            .iter()
            .position(|&b| b == b'-')
            .map_or(self.bytes.len(), |p| start + p);
        ParseError {
            kind,
            segment: String::from_utf8_lossy(&self.bytes[start..end]).into_owned(),
            offset: start,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn at_segment_end(&self) -> bool {
        matches!(self.peek(), None | Some(b'-'))
    }

    fn digit(&mut self, max: u8) -> Result<u8, ParseError> {
        match self.peek() {
            Some(b @ b'0'..=b'9') => {
                self.pos += 1;
                let d = b - b'0';
                if self.peek().is_some_and(|b| b.is_ascii_digit()) {
                    return Err(self.fail(ParseErrorKind::Malformed));
                }
                if d == 0 || d > max {
                    return Err(self.fail(ParseErrorKind::OutOfRange { max }));
                }
                Ok(d)
            }
            _ => Err(self.fail(ParseErrorKind::Malformed)),
        }
    }

    fn end_segment(&self) -> Result<(), ParseError> {
        if self.at_segment_end() {
            Ok(())
        } else {
            Err(self.fail(ParseErrorKind::Malformed))
        }
    }

    /// Consumes `-` and positions at the next segment, which must start with
    /// `letter`.
    fn open(&mut self, letter: u8) -> Result<(), ParseError> {
        self.end_segment()?;
        if self.peek() != Some(b'-') {
            self.seg_start = self.pos;
            return Err(self.fail(ParseErrorKind::Missing {
                expected: letter as char,
            }));
        }
        self.pos += 1;
        self.seg_start = self.pos;
        match self.peek() {
            Some(b) if b == letter => {
                self.pos += 1;
                Ok(())
            }
            Some(b) if ATTRIBUTE_LETTERS.contains(&b) => Err(self.fail(ParseErrorKind::WrongOrder {
                expected: letter as char,
            })),
            None => Err(self.fail(ParseErrorKind::Missing {
                expected: letter as char,
            })),
            Some(_) => Err(self.fail(ParseErrorKind::Malformed)),
        }
    }

    fn attribute(&mut self, letter: u8, max: u8) -> Result<u8, ParseError> {
        self.open(letter)?;
        let d = self.digit(max)?;
        self.end_segment()?;
        Ok(d)
    }

    fn fracture(&mut self) -> Result<Fracture, ParseError> {
        self.open(b'F')?;
        let grade = self.digit(3)?;
        let fill = match self.peek() {
            Some(b'u') => Some(Fill::Unfilled),
            Some(b'f') => Some(Fill::Filled),
            _ => None,
        };
        if fill.is_some() {
            self.pos += 1;
        }
        self.end_segment()?;
        match (grade, fill) {
            (1, None) => Ok(Fracture::None),
            (1, Some(_)) => Err(self.fail(ParseErrorKind::FillAfterUnfractured)),
            (2, f) => Ok(Fracture::Common(f)),
            (_, f) => Ok(Fracture::Pervasive(f)),
        }
    }

    fn finish(&mut self) -> Result<(), ParseError> {
        self.end_segment()?;
        if self.pos < self.bytes.len() {
            self.pos += 1;
            self.seg_start = self.pos;
            return Err(self.fail(ParseErrorKind::Malformed));
        }
        Ok(())
    }

    fn code(&mut self) -> Result<TaxonomyCode, ParseError> {
        let top = match self.peek() {
            None => return Err(self.fail(ParseErrorKind::Empty)),
            Some(b) => b,
        };
        self.pos += 1;
        let code = match top {
            b'A' => {
                let grain = grain(self.attribute(b'G', 2)?);
                let tone = tone(self.attribute(b'T', 2)?);
                let lamination = match self.attribute(b'L', 3)? {
                    1 => Lamination::None,
                    2 => Lamination::Weak,
                    _ => Lamination::Strong,
                };
                let nodules = match self.attribute(b'N', 3)? {
                    1 => Nodules::None,
                    2 => Nodules::CommonRaised,
                    _ => Nodules::Pervasive,
                };
                let fracture = self.fracture()?;
                TaxonomyCode::Bedrock {
                    grain,
                    tone,
                    lamination,
                    nodules,
                    fracture,
                }
            }
            b'B' => {
                let form = self.digit(1)?;
                let grain = grain(self.attribute(b'G', 2)?);
                let tone = tone(self.attribute(b'T', 2)?);
                TaxonomyCode::Floatrock { form, grain, tone }
            }
            b'C' => TaxonomyCode::Unconsolidated {
                kind: self.digit(3)?,
            },
            b'D' => TaxonomyCode::NonRocky {
                kind: self.digit(4)?,
            },
            _ => return Err(self.fail(ParseErrorKind::UnknownCategory)),
        };
        self.finish()?;
        debug_assert_eq!(self.pos, self.src.len());
        Ok(code)
    }
}

fn grain(d: u8) -> Grain {
    if d == 1 {
        Grain::Visible
    } else {
        Grain::NotVisible
    }
}

fn tone(d: u8) -> Tone {
    if d == 1 {
        Tone::Light
    } else {
        Tone::Dark
    }
}

/// Parses a code string.
pub fn parse(code_text: &str) -> Result<TaxonomyCode, ParseError> {
    Parser::new(code_text).code()
}

impl std::str::FromStr for TaxonomyCode {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, ParseError> {
        parse(s)
    }
}

impl fmt::Display for TaxonomyCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = |g: &Grain| if *g == Grain::Visible { 1 } else { 2 };
        let t = |t: &Tone| if *t == Tone::Light { 1 } else { 2 };
        match self {
            TaxonomyCode::Bedrock {
                grain,
                tone,
                lamination,
                nodules,
                fracture,
            } => {
                let l = *lamination as u8 + 1;
                let n = *nodules as u8 + 1;
                let fr = match fracture {
                    Fracture::None => 1,
                    Fracture::Common(_) => 2,
                    Fracture::Pervasive(_) => 3,
                };
                let fill = match fracture.fill() {
                    None => "",
                    Some(Fill::Unfilled) => "u",
                    Some(Fill::Filled) => "f",
                };
                write!(f, "A-G{}-T{}-L{l}-N{n}-F{fr}{fill}", g(grain), t(tone))
            }
            TaxonomyCode::Floatrock { form, grain, tone } => {
                write!(f, "B{form}-G{}-T{}", g(grain), t(tone))
            }
            TaxonomyCode::Unconsolidated { kind } => write!(f, "C{kind}"),
            TaxonomyCode::NonRocky { kind } => write!(f, "D{kind}"),
        }
    }
}

/// Canonical string form; `format(&parse(s)?) == s` for every valid `s`.
pub fn format(code: &TaxonomyCode) -> String {
    code.to_string()
}

impl TaxonomyCode {
    pub fn top(&self) -> TopLevel {
        match self {
            TaxonomyCode::Bedrock { .. } => TopLevel::Bedrock,
            TaxonomyCode::Floatrock { .. } => TopLevel::Floatrock,
            TaxonomyCode::Unconsolidated { .. } => TopLevel::Unconsolidated,
            TaxonomyCode::NonRocky { .. } => TopLevel::NonRocky,
        }
    }

    /// Every code the grammar accepts, in canonical order.
    pub fn all() -> Vec<TaxonomyCode> {
        let grains = [Grain::Visible, Grain::NotVisible];
        let tones = [Tone::Light, Tone::Dark];
        let fills = [None, Some(Fill::Unfilled), Some(Fill::Filled)];
        let mut fractures = vec![Fracture::None];
        fractures.extend(fills.iter().map(|&f| Fracture::Common(f)));
        fractures.extend(fills.iter().map(|&f| Fracture::Pervasive(f)));
        let mut out = Vec::new();
        for &grain in &grains {
            for &tone in &tones {
                for lamination in [Lamination::None, Lamination::Weak, Lamination::Strong] {
                    for nodules in [Nodules::None, Nodules::CommonRaised, Nodules::Pervasive] {
                        for &fracture in &fractures {
                            out.push(TaxonomyCode::Bedrock {
                                grain,
                                tone,
                                lamination,
                                nodules,
                                fracture,
                            });
                        }
                    }
                }
                out.push(TaxonomyCode::Floatrock {
                    form: 1,
                    grain,
                    tone,
                });
            }
        }
        out.extend((1..=3).map(|kind| TaxonomyCode::Unconsolidated { kind }));
        out.extend((1..=4).map(|kind| TaxonomyCode::NonRocky { kind }));
        out
    }
}

/// Human-readable expansion of a code.
pub fn describe(code: &TaxonomyCode) -> String {
    match code {
        TaxonomyCode::Bedrock {
            grain,
            tone,
            lamination,
            nodules,
            fracture,
        } => {
            let lam = match lamination {
                Lamination::None => "apparently unlaminated/massive",
                Lamination::Weak => "weakly laminated",
                Lamination::Strong => "strongly laminated",
            };
            let colour = match tone {
                Tone::Light => "red",
                Tone::Dark => "gray",
            };
            let (rock, grain_note) = match grain {
                Grain::Visible => ("sandstone", "grains visible"),
                Grain::NotVisible => ("mudstone", "no visible grains"),
            };
            let tone_note = match tone {
                Tone::Light => "light-toned",
                Tone::Dark => "dark-toned",
            };
            let nod = match nodules {
                Nodules::None => "non-nodular",
                Nodules::CommonRaised => "common protruding raised nodules",
                Nodules::Pervasive => "pervasively nodular",
            };
            let frac = match fracture {
                Fracture::None => "unfractured",
                Fracture::Common(_) => "lightly/commonly fractured",
                Fracture::Pervasive(_) => "heavily/pervasively fractured",
            };
            let fill = match fracture.fill() {
                None => "",
                Some(Fill::Unfilled) => " (unfilled)",
                Some(Fill::Filled) => " with calcium sulfate-filled veins",
            };
            format!("bedrock: {lam} {colour} {rock} ({tone_note}, {grain_note}), {nod}, {frac}{fill}")
        }
        TaxonomyCode::Floatrock { grain, tone, .. } => {
            let tone = match tone {
                Tone::Light => "Red/Light-toned",
                Tone::Dark => "Dark-toned",
            };
            let grain = match grain {
                Grain::Visible => "grains visible",
                Grain::NotVisible => "no visible grains",
            };
            format!("{tone}, massive floatrock ({grain})")
        }
        TaxonomyCode::Unconsolidated { kind } => {
            let what = match kind {
                1 => "Sand",
                2 => "Mostly Sand (>50%), Some Rounded Pebbles (<50%)",
                _ => "Some Sand (<50%), Mostly Rounded Pebbles (>50%)",
            };
            format!("unconsolidated material: {what}")
        }
        TaxonomyCode::NonRocky { kind } => {
            let what = match kind {
                1 => "Rover Sand Tracks",
                2 => "Rover Parts",
                3 => "Out of Focus",
                _ => "Heavily Shadowed Areas",
            };
            format!("non-rocky material: {what}")
        }
    }
}

/// One expert-defined class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TerrainClass {
    pub class_id: u32,
    pub code: TaxonomyCode,
    pub description: String,
}

/// Classes are identified by id, not by code.
pub fn same_class(a: &TerrainClass, b: &TerrainClass) -> bool {
    a.class_id == b.class_id
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("line {line}: expected class_id<TAB>code<TAB>description")]
    Fields { line: usize },
    #[error("line {line}: bad class id {text:?}")]
    ClassId { line: usize, text: String },
    #[error("line {line}: {source}")]
    Code { line: usize, source: ParseError },
    #[error("line {line}: duplicate class id {class_id}")]
    Duplicate { line: usize, class_id: u32 },
}

/// Class registry file: `class_id<TAB>code<TAB>description` per line, with an
/// optional `class_id` header.
#[derive(Clone, Debug, Default)]
pub struct ClassRegistry {
    classes: Vec<TerrainClass>,
}

impl ClassRegistry {
    /// The shipped 25-class registry.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_CLASSES).expect("builtin registry is valid")
    }

    pub fn parse(text: &str) -> Result<Self, RegistryError> {
        let (classes, errors) = Self::scan(text);
        match errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(Self { classes }),
        }
    }

    /// Every problem in `text`, for `validate`-style reporting.
    pub fn validate(text: &str) -> Vec<RegistryError> {
        Self::scan(text).1
    }

    fn scan(text: &str) -> (Vec<TerrainClass>, Vec<RegistryError>) {
        let mut classes = Vec::new();
        let mut errors = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() || (n == 0 && line.starts_with("class_id")) {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (Some(id), Some(code), Some(desc)) = (fields.next(), fields.next(), fields.next())
            else {
                errors.push(RegistryError::Fields { line: line_no });
                continue;
            };
            let Ok(class_id) = id.trim().parse::<u32>() else {
                errors.push(RegistryError::ClassId {
                    line: line_no,
                    text: id.to_string(),
                });
                continue;
            };
            let code = match parse(code) {
                Ok(c) => c,
                Err(source) => {
                    errors.push(RegistryError::Code {
                        line: line_no,
                        source,
                    });
                    continue;
                }
            };
            if !seen.insert(class_id) {
                errors.push(RegistryError::Duplicate {
                    line: line_no,
                    class_id,
                });
                continue;
            }
            classes.push(TerrainClass {
                class_id,
                code,
                description: desc.to_string(),
            });
        }
        (classes, errors)
    }

    pub fn classes(&self) -> &[TerrainClass] {
        &self.classes
    }

    pub fn get(&self, class_id: u32) -> Option<&TerrainClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn push(&mut self, class: TerrainClass) -> Result<(), RegistryError> {
        if self.get(class.class_id).is_some() {
            return Err(RegistryError::Duplicate {
                line: 0,
                class_id: class.class_id,
            });
        }
        self.classes.push(class);
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class_id\tcode\tdescription\n");
        for c in &self.classes {
            out.push_str(&format!("{}\t{}\t{}\n", c.class_id, c.code, c.description));
        }
        out
    }
}
