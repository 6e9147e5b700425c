//! Program inputs and the boundary-value suite generator.
//!
//! Buffers are handed to the guest through `r0`, `r1`, ... in order, and
//! scalars take the registers that follow.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "BufferRepr", into = "BufferRepr")]
pub struct InputBuffer {
    pub role: String,
    pub data: Vec<u8>,
}

/// Wire form: bytes as hex, or `text` for readable fixtures.
#[derive(Serialize, Deserialize)]
struct BufferRepr {
    role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

impl From<BufferRepr> for InputBuffer {
    fn from(r: BufferRepr) -> Self {
        let data = match (r.hex, r.text) {
            (Some(h), _) => hex::decode(h).unwrap_or_default(),
            (None, Some(t)) => t.into_bytes(),
            (None, None) => Vec::new(),
        };
        InputBuffer { role: r.role, data }
    }
}

impl From<InputBuffer> for BufferRepr {
    fn from(b: InputBuffer) -> Self {
        BufferRepr {
            role: b.role,
            hex: Some(hex::encode(b.data)),
            text: None,
        }
    }
}

impl InputBuffer {
    pub fn new(role: impl Into<String>, data: impl Into<Vec<u8>>) -> InputBuffer {
        InputBuffer {
            role: role.into(),
            data: data.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestInput {
    pub name: String,
    #[serde(default)]
    pub buffers: Vec<InputBuffer>,
    #[serde(default)]
    pub scalars: Vec<i32>,
}

impl TestInput {
    pub fn new(name: impl Into<String>) -> TestInput {
        TestInput {
            name: name.into(),
            buffers: Vec::new(),
            scalars: Vec::new(),
        }
    }

    pub fn with_buffer(mut self, role: impl Into<String>, data: impl Into<Vec<u8>>) -> TestInput {
        self.buffers.push(InputBuffer::new(role, data));
        self
    }

    pub fn with_scalar(mut self, v: i32) -> TestInput {
        self.scalars.push(v);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferDomain {
    pub role: String,
    pub capacity: usize,
    /// Byte used to fill generated buffers.
    #[serde(default = "default_fill")]
    pub fill: u8,
}

fn default_fill() -> u8 {
    b'A'
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarDomain {
    Range { min: i32, max: i32 },
    /// The length of buffer `n`; follows whatever length was generated for it.
    LengthOf(usize),
}

impl ScalarDomain {
    pub fn full() -> ScalarDomain {
        ScalarDomain::Range {
            min: i32::MIN,
            max: i32::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InputDomain {
    #[serde(default)]
    pub buffers: Vec<BufferDomain>,
    #[serde(default)]
    pub scalars: Vec<ScalarDomain>,
}

/// `{min, min+1, 0, max-1, max}` restricted to the domain, ascending.
pub fn scalar_boundaries(min: i32, max: i32) -> Vec<i32> {
    let mut v: Vec<i32> = [
        Some(min),
        min.checked_add(1),
        Some(0),
        max.checked_sub(1),
        Some(max),
    ]
    .into_iter()
    .flatten()
    .filter(|x| (min..=max).contains(x))
    .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// `{0, 1, capacity-1, capacity}`. Lengths past capacity are never benign.
pub fn buffer_boundaries(capacity: usize) -> Vec<usize> {
    let mut v = vec![0, 1.min(capacity), capacity.saturating_sub(1), capacity];
    v.sort_unstable();
    v.dedup();
    v
}

/// Cartesian product of the boundary values of every parameter.
pub fn boundary_suite(domain: &InputDomain) -> Vec<TestInput> {
    let buffer_choices: Vec<Vec<usize>> = domain
        .buffers
        .iter()
        .map(|b| buffer_boundaries(b.capacity))
        .collect();
    let scalar_choices: Vec<Vec<i32>> = domain
        .scalars
        .iter()
        .map(|s| match s {
            ScalarDomain::Range { min, max } => scalar_boundaries(*min, *max),
            ScalarDomain::LengthOf(_) => vec![0],
        })
        .collect();

    let mut out = Vec::new();
    let mut lengths = vec![0usize; buffer_choices.len()];
    let mut scalars = vec![0i32; scalar_choices.len()];
    let total_b: usize = buffer_choices.iter().map(Vec::len).product();
    let total_s: usize = scalar_choices.iter().map(Vec::len).product();
    for bi in 0..total_b {
        let mut k = bi;
        for (slot, choices) in lengths.iter_mut().zip(&buffer_choices) {
            *slot = choices[k % choices.len()];
            k /= choices.len();
        }
        for si in 0..total_s {
            let mut k = si;
            for (slot, choices) in scalars.iter_mut().zip(&scalar_choices) {
                *slot = choices[k % choices.len()];
                k /= choices.len();
            }
            let mut input = TestInput::new(String::new());
            let mut name = Vec::new();
            for (b, len) in domain.buffers.iter().zip(&lengths) {
                input.buffers.push(InputBuffer::new(b.role.clone(), vec![b.fill; *len]));
                name.push(format!("{}={}", b.role, len));
            }
            for (s, v) in domain.scalars.iter().zip(&scalars) {
                let v = match s {
                    ScalarDomain::LengthOf(b) => lengths.get(*b).copied().unwrap_or(0) as i32,
                    ScalarDomain::Range { .. } => *v,
                };
                input.scalars.push(v);
                name.push(v.to_string());
            }
            input.name = if name.is_empty() {
                "default".to_string()
            } else {
                name.join(",")
            };
            out.push(input);
        }
    }
    out
}

/// A test suite as stored on disk: explicit inputs, a domain to expand with
/// [`boundary_suite`], or both.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SuiteFile {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<TestInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<InputDomain>,
}

impl SuiteFile {
    pub fn expand(&self) -> Vec<TestInput> {
        let mut out = self.inputs.clone();
        if let Some(d) = &self.domain {
            out.extend(boundary_suite(d));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_domain_boundaries() {
        assert_eq!(
            scalar_boundaries(i32::MIN, i32::MAX),
            vec![i32::MIN, i32::MIN + 1, 0, i32::MAX - 1, i32::MAX]
        );
        assert_eq!(scalar_boundaries(0, 2), vec![0, 1, 2]);
        assert_eq!(scalar_boundaries(5, 5), vec![5]);
    }

    #[test]
    fn buffer_lengths_stop_at_capacity() {
        assert_eq!(buffer_boundaries(16), vec![0, 1, 15, 16]);
        assert_eq!(buffer_boundaries(1), vec![0, 1]);
        assert_eq!(buffer_boundaries(0), vec![0]);
    }

    #[test]
    fn suite_is_cartesian_and_couples_lengths() {
        let domain = InputDomain {
            buffers: vec![BufferDomain {
                role: "src".into(),
                capacity: 8,
                fill: b'x',
            }],
            scalars: vec![ScalarDomain::LengthOf(0), ScalarDomain::Range { min: 0, max: 2 }],
        };
        let suite = boundary_suite(&domain);
        assert_eq!(suite.len(), 4 * 3);
        for t in &suite {
            assert_eq!(t.scalars[0] as usize, t.buffers[0].data.len());
            assert!(t.buffers[0].data.iter().all(|&b| b == b'x'));
        }
        assert!(boundary_suite(&InputDomain::default()).len() == 1);
    }

    #[test]
    fn buffer_json_accepts_text_and_hex() {
        let t: TestInput = serde_json::from_str(
            r#"{"name":"a","buffers":[{"role":"src","text":"AB"},{"role":"x","hex":"0001"}]}"#,
        )
        .unwrap();
        assert_eq!(t.buffers[0].data, b"AB");
        assert_eq!(t.buffers[1].data, vec![0, 1]);
        let back: TestInput = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
