//! Compact alphanumeric architecture strings, e.g.
//! `2x128C3-MP2-2x128C3-MP2-2x256C3-256FC-10Softmax`.
//!
//! Tokens are separated by `-`:
//!
//! * `<r>x<f>C<k>`: `r` conv layers of `f` maps with `k`x`k` kernels
//! * `<f>C<k>`: one conv layer
//! * `<i>x<f>(C<k>)` / `<f>(C<k>)`: one conv layer; `i` names the incoming
//!   map count and is checked against the running map count
//! * `MP<s>`: 3x3 overlapped max-pooling with stride `s` (`MP` alone is `MP2`)
//! * `MP<s>w<w>`: the same with a `w`x`w` window
//! * `<n>FC`, or a bare `<n>` anywhere but last: fully connected layer
//! * `<n>Softmax`, or a bare trailing `<n>`: classifier over `n` classes
//!
//! Parentheses may group tokens, `(2x64C3)-MP2`, and are otherwise ignored.
//! Every conv layer carries an implicit batch norm and ReLU.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POOL_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `(k-1)/2`, preserving extents for odd `k`.
    #[default]
    Same,
    /// No padding.
    Valid,
}

impl Padding {
    pub fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(format!("unknown padding {other:?} (expected same or valid)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv { maps: usize, k: usize },
    MaxPool { window: usize, stride: usize },
    Fc { units: usize },
    Softmax { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    input_shape: [usize; 3],
    padding: Padding,
    layers: Vec<LayerSpec>,
}

fn parse_err(index: usize, token: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        index,
        token: token.to_string(),
        message: message.into(),
    }
}

struct Patterns {
    repeat_conv: Regex,
    incoming_conv: Regex,
    pool: Regex,
    fc: Regex,
    softmax: Regex,
    bare: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        repeat_conv: Regex::new(r"^(?:(\d+)[xX])?(\d+)C(\d+)$").unwrap(),
        incoming_conv: Regex::new(r"^(?:(\d+)[xX])?(\d+)\(C(\d+)\)$").unwrap(),
        pool: Regex::new(r"^MP(\d*)(?:w(\d+))?$").unwrap(),
        fc: Regex::new(r"^(\d+)FC$").unwrap(),
        softmax: Regex::new(r"^(\d+)(?i:softmax)$").unwrap(),
        bare: Regex::new(r"^(\d+)$").unwrap(),
    })
}

fn number(index: usize, token: &str, digits: &str) -> Result<usize> {
    let v: usize = digits
        .parse()
        .map_err(|_| parse_err(index, token, format!("number {digits:?} out of range")))?;
    if v == 0 {
        return Err(parse_err(index, token, "extents must be positive"));
    }
    Ok(v)
}

/// Raw tokens with group parentheses removed.
fn tokenize(text: &str) -> Result<Vec<String>> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '\u{2212}' | '\u{2013}' => '-',
            '\u{00d7}' => 'x',
            other => other,
        })
        .collect();
    let mut depth = 0usize;
    let mut tokens = Vec::new();
    for (index, raw) in cleaned.split('-').enumerate() {
        let opens = raw.chars().take_while(|&c| c == '(').count();
        let mut body = &raw[opens..];
        let trailing = body.chars().rev().take_while(|&c| c == ')').count();
        let inner = usize::from(body.contains("(C"));
        let closes = trailing.saturating_sub(inner);
        body = &body[..body.len() - closes];
        depth += opens;
        if closes > depth {
            return Err(parse_err(index, raw, "unbalanced ')'"));
        }
        depth -= closes;
        if body.is_empty() {
            return Err(parse_err(index, raw, "empty token"));
        }
        tokens.push(body.to_string());
    }
    if depth != 0 {
        let last = tokens.len().saturating_sub(1);
        return Err(parse_err(last, cleaned.split('-').last().unwrap_or(""), "unbalanced '('"));
    }
    Ok(tokens)
}

impl NetworkSpec {
    /// Parses with `same` padding.
    pub fn parse(text: &str, input_shape: [usize; 3]) -> Result<Self> {
        Self::parse_with_padding(text, input_shape, Padding::Same)
    }

    pub fn parse_with_padding(text: &str, input_shape: [usize; 3], padding: Padding) -> Result<Self> {
        let p = patterns();
        let tokens = tokenize(text)?;
        let last = tokens.len() - 1;
        let mut layers = Vec::new();
        let mut spans = Vec::new();
        let mut maps = input_shape[0];
        for (index, token) in tokens.iter().enumerate() {
            let tok = token.as_str();
            let start = layers.len();
            if let Some(c) = p.repeat_conv.captures(tok) {
                let repeat = match c.get(1) {
                    Some(r) => number(index, tok, r.as_str())?,
                    None => 1,
                };
                let f = number(index, tok, &c[2])?;
                let k = number(index, tok, &c[3])?;
                for _ in 0..repeat {
                    layers.push(LayerSpec::Conv { maps: f, k });
                }
                maps = f;
            } else if let Some(c) = p.incoming_conv.captures(tok) {
                if let Some(i) = c.get(1) {
                    let incoming = number(index, tok, i.as_str())?;
                    if incoming != maps {
                        return Err(parse_err(
                            index,
                            tok,
                            format!("declares {incoming} incoming maps but {maps} arrive"),
                        ));
                    }
                }
                let f = number(index, tok, &c[2])?;
                let k = number(index, tok, &c[3])?;
                layers.push(LayerSpec::Conv { maps: f, k });
                maps = f;
            } else if let Some(c) = p.pool.captures(tok) {
                let stride = if c[1].is_empty() { 2 } else { number(index, tok, &c[1])? };
                let window = match c.get(2) {
                    Some(w) => number(index, tok, w.as_str())?,
                    None => POOL_WINDOW,
                };
                layers.push(LayerSpec::MaxPool { window, stride });
            } else if let Some(c) = p.fc.captures(tok) {
                layers.push(LayerSpec::Fc {
                    units: number(index, tok, &c[1])?,
                });
            } else if let Some(c) = p.softmax.captures(tok) {
                if index != last {
                    return Err(parse_err(index, tok, "softmax must be the final layer"));
                }
                layers.push(LayerSpec::Softmax {
                    classes: number(index, tok, &c[1])?,
                });
            } else if let Some(c) = p.bare.captures(tok) {
                let n = number(index, tok, &c[1])?;
                layers.push(if index == last {
                    LayerSpec::Softmax { classes: n }
                } else {
                    LayerSpec::Fc { units: n }
                });
            } else {
                return Err(parse_err(index, tok, "unknown token"));
            }
            spans.extend(std::iter::repeat((index, tok)).take(layers.len() - start));
        }
        let spec = NetworkSpec {
            input_shape,
            padding,
            layers,
        };
        spec.validate_with(|layer| {
            let (i, t) = spans[layer];
            (i, t.to_string())
        })?;
        Ok(spec)
    }

    /// Builds a spec from layer descriptors, validating it.
    pub fn from_layers(input_shape: [usize; 3], padding: Padding, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = NetworkSpec {
            input_shape,
            padding,
            layers,
        };
        spec.validate_with(|layer| (layer, format!("{:?}", spec.layers.get(layer))))?;
        Ok(spec)
    }

    fn validate_with(&self, locate: impl Fn(usize) -> (usize, String)) -> Result<()> {
        let err = |layer: usize, msg: String| {
            let (index, token) = locate(layer);
            Error::Parse {
                index,
                token,
                message: msg,
            }
        };
        let [c0, h0, w0] = self.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::InvalidArgument(format!("input shape {:?} has a zero extent", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(err(0, "empty architecture".into()));
        }
        let (mut h, mut w) = (h0, w0);
        let mut flat = false;
        let mut convs = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { maps, k } => {
                    if flat {
                        return Err(err(li, "convolution after a fully connected layer".into()));
                    }
                    if maps == 0 || k == 0 {
                        return Err(err(li, "extents must be positive".into()));
                    }
                    let pad = self.padding.amount(k);
                    if h + 2 * pad < k || w + 2 * pad < k {
                        return Err(err(li, format!("spatial underflow: {h}x{w} input to a {k}x{k} kernel")));
                    }
                    h = h + 2 * pad - k + 1;
                    w = w + 2 * pad - k + 1;
                    convs += 1;
                }
                LayerSpec::MaxPool { window, stride } => {
                    if flat {
                        return Err(err(li, "pooling after a fully connected layer".into()));
                    }
                    if stride == 0 || window == 0 {
                        return Err(err(li, "pool window and stride must be positive".into()));
                    }
                    if h < window || w < window {
                        return Err(err(li, format!("spatial underflow: pooling {h}x{w} below 1x1")));
                    }
                    h = (h - window) / stride + 1;
                    w = (w - window) / stride + 1;
                }
                LayerSpec::Fc { units } => {
                    if units == 0 {
                        return Err(err(li, "extents must be positive".into()));
                    }
                    flat = true;
                }
                LayerSpec::Softmax { classes } => {
                    if li + 1 != self.layers.len() {
                        return Err(err(li, "softmax must be the final layer".into()));
                    }
                    if classes < 2 {
                        return Err(err(li, "a classifier needs at least 2 classes".into()));
                    }
                }
            }
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax { .. })) {
            return Err(err(self.layers.len() - 1, "the last layer must be a softmax classifier".into()));
        }
        if convs == 0 {
            return Err(err(0, "no convolution layer".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Softmax { classes }) => *classes,
            _ => unreachable!("validated spec ends in softmax"),
        }
    }

    /// Number of conv layers.
    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count()
    }

    /// Map counts of the conv layers, in order.
    pub fn conv_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { maps, .. } => Some(*maps),
                _ => None,
            })
            .collect()
    }

    /// Output shape `[maps, H, W]` of every layer; FC and softmax report `[units, 1, 1]`.
    pub fn shapes(&self) -> Vec<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input_shape;
        self.layers
            .iter()
            .map(|layer| {
                match *layer {
                    LayerSpec::Conv { maps, k } => {
                        let pad = self.padding.amount(k);
                        c = maps;
                        h = h + 2 * pad - k + 1;
                        w = w + 2 * pad - k + 1;
                    }
                    LayerSpec::MaxPool { window, stride } => {
                        h = (h - window) / stride + 1;
                        w = (w - window) / stride + 1;
                    }
                    LayerSpec::Fc { units } => (c, h, w) = (units, 1, 1),
                    LayerSpec::Softmax { classes } => (c, h, w) = (classes, 1, 1),
                }
                [c, h, w]
            })
            .collect()
    }

    /// Same architecture with conv layer `conv` (0-based) resized to `maps`.
    pub fn with_conv_width(&self, conv: usize, maps: usize) -> Result<Self> {
        let mut layers = self.layers.clone();
        let slot = layers
            .iter_mut()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .nth(conv)
            .ok_or_else(|| Error::InvalidArgument(format!("no conv layer {}", conv + 1)))?;
        if let LayerSpec::Conv { maps: m, .. } = slot {
            *m = maps;
        }
        NetworkSpec::from_layers(self.input_shape, self.padding, layers)
    }

    /// Canonical string form: consecutive identical convs merged as `<r>x<f>C<k>`.
    pub fn render(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            match self.layers[i] {
                LayerSpec::Conv { maps, k } => {
                    let mut run = 1;
                    while self.layers.get(i + run) == Some(&LayerSpec::Conv { maps, k }) {
                        run += 1;
                    }
                    parts.push(if run == 1 {
                        format!("{maps}C{k}")
                    } else {
                        format!("{run}x{maps}C{k}")
                    });
                    i += run;
                    continue;
                }
                LayerSpec::MaxPool { window, stride } if window == POOL_WINDOW => parts.push(format!("MP{stride}")),
                LayerSpec::MaxPool { window, stride } => parts.push(format!("MP{stride}w{window}")),
                LayerSpec::Fc { units } => parts.push(format!("{units}FC")),
                LayerSpec::Softmax { classes } => parts.push(format!("{classes}Softmax")),
            }
            i += 1;
        }
        parts.join("-")
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

pub fn parse_architecture(text: &str, input_shape: [usize; 3]) -> Result<NetworkSpec> {
    NetworkSpec::parse(text, input_shape)
}

pub fn render_architecture(spec: &NetworkSpec) -> String {
    spec.render()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CNN_SMALL: &str = "2x128C3-MP2-2x128C3-MP2-2x256C3-256FC-10Softmax";

    #[test]
    fn cnn_small_parses_and_renders_back() {
        let spec = NetworkSpec::parse(CNN_SMALL, [3, 32, 32]).unwrap();
        assert_eq!(spec.conv_count(), 6);
        let pools = spec.layers().iter().filter(|l| matches!(l, LayerSpec::MaxPool { .. })).count();
        assert_eq!(pools, 2);
        assert_eq!(spec.layers()[8], LayerSpec::Fc { units: 256 });
        assert_eq!(spec.classes(), 10);
        assert_eq!(spec.render(), CNN_SMALL);
        assert_eq!(spec.shapes()[2], [128, 15, 15]);
    }

    #[test]
    fn figure_style_mnist_string() {
        let spec =
            NetworkSpec::parse_with_padding("1x6(C5)-6x16(C5)-16x120(C5)-84-10", [1, 28, 28], Padding::Valid).unwrap();
        assert_eq!(
            spec.layers(),
            &[
                LayerSpec::Conv { maps: 6, k: 5 },
                LayerSpec::Conv { maps: 16, k: 5 },
                LayerSpec::Conv { maps: 120, k: 5 },
                LayerSpec::Fc { units: 84 },
                LayerSpec::Softmax { classes: 10 },
            ]
        );
        assert_eq!(spec.render(), "6C5-16C5-120C5-84FC-10Softmax");
        assert_eq!(spec.shapes()[2], [120, 16, 16]);
    }

    #[test]
    fn unicode_separators_and_groups() {
        let spec = NetworkSpec::parse("(128C3\u{2212}89C3)-MP-(89C3-89C3)-MP-(179C3-179C3)-256FC-10 Softmax", [3, 32, 32])
            .unwrap();
        assert_eq!(spec.conv_widths(), vec![128, 89, 89, 89, 179, 179]);
        assert_eq!(spec.render(), "128C3-89C3-MP2-2x89C3-MP2-2x179C3-256FC-10Softmax");
        let svhn = NetworkSpec::parse("(2\u{00d7}64C3)-MP2-(2\u{00d7}128C3)-MP2-(2\u{00d7}128C3)-512FC-512FC-10Softmax", [3, 32, 32])
            .unwrap();
        assert_eq!(svhn.conv_widths(), vec![64, 64, 128, 128, 128, 128]);
    }

    #[test]
    fn softmax_alone_has_no_conv() {
        let err = NetworkSpec::parse("10Softmax", [3, 32, 32]).unwrap_err();
        assert!(err.to_string().contains("no convolution"), "{err}");
    }

    #[test]
    fn single_conv_render() {
        let spec = NetworkSpec::parse("64C3-10", [3, 8, 8]).unwrap();
        assert_eq!(spec.render(), "64C3-10Softmax");
    }

    #[test]
    fn errors_carry_position() {
        match NetworkSpec::parse("64C3-MPX-10", [3, 8, 8]) {
            Err(Error::Parse { index, token, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(token, "MPX");
            }
            other => panic!("unexpected {other:?}"),
        }
        match NetworkSpec::parse("8C3-MP2-MP2-MP2-10", [1, 8, 8]) {
            Err(Error::Parse { index, message, .. }) => {
                assert_eq!(index, 3);
                assert!(message.contains("underflow"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn incoming_count_is_cross_checked() {
        let err = NetworkSpec::parse("1x6(C5)-5x16(C5)-10", [1, 28, 28]).unwrap_err();
        assert!(matches!(err, Error::Parse { index: 1, .. }));
    }

    #[test]
    fn valid_padding_underflow() {
        assert!(NetworkSpec::parse_with_padding(CNN_SMALL, [3, 32, 32], Padding::Valid).is_err());
    }

    #[test]
    fn interior_softmax_rejected() {
        assert!(NetworkSpec::parse("8C3-10Softmax-10", [1, 8, 8]).is_err());
        assert!(NetworkSpec::parse("8C3-16FC-8C3-10", [1, 8, 8]).is_err());
    }
}
