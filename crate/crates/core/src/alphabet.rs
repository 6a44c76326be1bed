//! Typed-key alphabet and CTC emission indexing.
//!
//! 26 lowercase letters, space, apostrophe and backspace make up the 29 typed
//! keys. Emission lattices prepend the CTC blank at index 0, giving 30 rows.

/// Backspace as it appears in key sequences and session files.
pub const BACKSPACE: char = '\u{8}';

/// Emission index of the CTC blank.
pub const BLANK: usize = 0;

/// Number of typed keys.
pub const KEY_COUNT: usize = 29;

/// Emission width: typed keys plus blank.
pub const EMISSION_SIZE: usize = KEY_COUNT + 1;

/// Every typed key, in emission order (emission index = position + 1).
pub const KEYS: [char; KEY_COUNT] = [
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r',
    's', 't', 'u', 'v', 'w', 'x', 'y', 'z', ' ', '\'', BACKSPACE,
];

pub fn key_index(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        ' ' => Some(26),
        '\'' => Some(27),
        BACKSPACE => Some(28),
        _ => None,
    }
}

pub fn is_key(c: char) -> bool {
    key_index(c).is_some()
}

/// Emission index of a key (blank excluded).
pub fn emission_index(c: char) -> Option<usize> {
    key_index(c).map(|i| i + 1)
}

/// Applies backspace semantics: each backspace removes the preceding
/// surviving character; a backspace on empty text does nothing.
pub fn apply_backspace<I: IntoIterator<Item = char>>(keys: I) -> String {
    let mut out = String::new();
    for c in keys {
        if c == BACKSPACE {
            out.pop();
        } else {
            out.push(c);
        }
    }
    out
}

/// Lowercases, maps anything outside the alphabet to space and collapses runs
/// of spaces. Backspace is treated as foreign here.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars().flat_map(char::to_lowercase) {
        let c = if is_key(c) && c != BACKSPACE { c } else { ' ' };
        if c == ' ' && (out.is_empty() || out.ends_with(' ')) {
            continue;
        }
        out.push(c);
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Mapping from lattice column to symbol used by the decoders.
///
/// Column 0 is always the blank; the remaining columns name a character, one
/// of which may be the backspace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    symbols: Vec<char>,
}

impl Labels {
    /// Labels for lattice columns `1..=symbols.len()`.
    pub fn new(symbols: Vec<char>) -> Self {
        Labels { symbols }
    }

    /// Column count including the blank.
    pub fn width(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Symbol for a non-blank column.
    pub fn symbol(&self, column: usize) -> char {
        self.symbols[column - 1]
    }

    pub fn column(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + 1)
    }
}

impl Default for Labels {
    fn default() -> Self {
        Labels::new(KEYS.to_vec())
    }
}
