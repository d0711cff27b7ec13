use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use super::{ModelError, Result};
use crate::gaussian::NoiseStream;

/// Which side of the model a coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Generative model only.
    Theta,
    /// Inference network only.
    Phi,
    /// Read by both `p` and `q`.
    Shared,
}

impl Role {
    pub fn in_theta(self) -> bool {
        matches!(self, Role::Theta | Role::Shared)
    }

    pub fn in_phi(self) -> bool {
        matches!(self, Role::Phi | Role::Shared)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Theta => "theta",
            Role::Phi => "phi",
            Role::Shared => "shared",
        })
    }
}

impl FromStr for Role {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" => Ok(Role::Theta),
            "phi" => Ok(Role::Phi),
            "shared" => Ok(Role::Shared),
            other => Err(ModelError::Layout(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub role: Role,
}

impl ParamSlice {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Builds a contiguous layout from `(name, len, role)` triples.
pub(crate) fn contiguous(parts: &[(&str, usize, Role)]) -> Vec<ParamSlice> {
    let mut offset = 0;
    parts
        .iter()
        .map(|&(name, len, role)| {
            let s = ParamSlice {
                name: name.to_string(),
                offset,
                len,
                role,
            };
            offset += len;
            s
        })
        .collect()
}

/// Flat parameter storage with a named, role-tagged layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    flat: Vec<f64>,
    layout: Vec<ParamSlice>,
    roles: Vec<Role>,
}

const CHECKPOINT_MAGIC: &str = "dreg-lab-params v1";

impl ParamVector {
    /// Slices must be disjoint and cover `flat` exactly.
    pub fn new(layout: Vec<ParamSlice>, flat: Vec<f64>) -> Result<Self> {
        let mut sorted: Vec<&ParamSlice> = layout.iter().collect();
        sorted.sort_by_key(|s| s.offset);
        let mut next = 0;
        for s in &sorted {
            if s.offset != next {
                return Err(ModelError::Layout(format!(
                    "slice `{}` starts at {} but the previous slice ends at {next}",
                    s.name, s.offset
                )));
            }
            next += s.len;
        }
        if next != flat.len() {
            return Err(ModelError::Layout(format!(
                "layout covers {next} values but the vector holds {}",
                flat.len()
            )));
        }
        for (i, a) in layout.iter().enumerate() {
            if layout[..i].iter().any(|b| b.name == a.name) {
                return Err(ModelError::Layout(format!("duplicate slice `{}`", a.name)));
            }
        }
        let mut roles = vec![Role::Theta; flat.len()];
        for s in &layout {
            roles[s.range()].fill(s.role);
        }
        Ok(ParamVector { flat, layout, roles })
    }

    pub fn zeros(layout: Vec<ParamSlice>) -> Result<Self> {
        let n = layout.iter().map(|s| s.len).sum();
        Self::new(layout, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn layout(&self) -> &[ParamSlice] {
        &self.layout
    }

    pub fn role(&self, index: usize) -> Role {
        self.roles[index]
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn slice(&self, name: &str) -> Option<&ParamSlice> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.slice(name).map(|s| &self.flat[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.slice(name)?.range();
        Some(&mut self.flat[r])
    }

    /// Coordinates read by the generative model.
    pub fn theta_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i].in_theta()).collect()
    }

    /// Coordinates read by the inference network.
    pub fn phi_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i].in_phi()).collect()
    }

    /// Adds independent `N(0, sigma^2)` offsets drawn from `(seed, stream)`.
    pub fn perturbed(&self, sigma: f64, seed: u64, stream: u64) -> ParamVector {
        let mut out = self.clone();
        if sigma == 0.0 {
            return out;
        }
        let mut noise = vec![0.0; self.len()];
        NoiseStream::new(seed, stream).fill_normal(0, &mut noise);
        for (v, n) in out.flat.iter_mut().zip(noise) {
            *v += sigma * n;
        }
        out
    }

    /// Writes the plain-text layout table followed by the values as
    /// little-endian `f64`.
    ///
    /// ```text
    /// dreg-lab-params v1
    /// <name> <offset> <length> <role>
    /// ...
    /// end
    /// <8 * n bytes>
    /// ```
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        for s in &self.layout {
            writeln!(w, "{} {} {} {}", s.name, s.offset, s.len, s.role)?;
        }
        writeln!(w, "end")?;
        for v in &self.flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint(format!("bad header `{}`", line.trim_end())));
        }
        let mut layout = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(ModelError::Checkpoint("missing `end` line".into()));
            }
            let row = line.trim_end();
            if row == "end" {
                break;
            }
            let fields: Vec<&str> = row.split(' ').collect();
            let [name, offset, len, role] = fields[..] else {
                return Err(ModelError::Checkpoint(format!("bad layout row `{row}`")));
            };
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| ModelError::Checkpoint(format!("bad number `{s}`")))
            };
            layout.push(ParamSlice {
                name: name.to_string(),
                offset: parse(offset)?,
                len: parse(len)?,
                role: role.parse()?,
            });
        }
        let n: usize = layout.iter().map(|s| s.len).sum();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * n {
            return Err(ModelError::Checkpoint(format!(
                "expected {} payload bytes, found {}",
                8 * n,
                bytes.len()
            )));
        }
        let flat = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(layout, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        let layout = contiguous(&[("theta", 2, Role::Theta), ("a", 3, Role::Phi), ("s", 1, Role::Shared)]);
        ParamVector::new(layout, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()
    }

    #[test]
    fn named_access_and_roles() {
        let p = sample();
        assert_eq!(p.get("a"), Some(&[3.0, 4.0, 5.0][..]));
        assert_eq!(p.theta_indices(), vec![0, 1, 5]);
        assert_eq!(p.phi_indices(), vec![2, 3, 4, 5]);
        assert_eq!(p.role(5), Role::Shared);
        assert!(p.get("missing").is_none());
    }

    #[test]
    fn layout_must_cover_exactly() {
        let gap = vec![
            ParamSlice { name: "a".into(), offset: 0, len: 2, role: Role::Theta },
            ParamSlice { name: "b".into(), offset: 3, len: 1, role: Role::Phi },
        ];
        assert!(ParamVector::new(gap, vec![0.0; 4]).is_err());
        let short = contiguous(&[("a", 2, Role::Theta)]);
        assert!(ParamVector::new(short, vec![0.0; 3]).is_err());
        let dup = contiguous(&[("a", 1, Role::Theta), ("a", 1, Role::Phi)]);
        assert!(ParamVector::new(dup, vec![0.0; 2]).is_err());
    }

    #[test]
    fn perturbation() {
        let p = sample();
        assert_eq!(p.perturbed(0.0, 3, 1), p);
        assert_eq!(p.perturbed(0.1, 3, 1), p.perturbed(0.1, 3, 1));
        assert_ne!(p.perturbed(0.1, 3, 1), p.perturbed(0.1, 4, 1));

        let layout = contiguous(&[("w", 10_000, Role::Phi)]);
        let big = ParamVector::zeros(layout).unwrap().perturbed(0.01, 17, 0);
        let n = big.len() as f64;
        let mean = big.flat().iter().sum::<f64>() / n;
        let sd = (big.flat().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.009..=0.011).contains(&sd), "{sd}");
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let text_end = buf.windows(4).position(|w| w == b"end\n").unwrap();
        assert_eq!(
            std::str::from_utf8(&buf[..text_end]).unwrap(),
            "dreg-lab-params v1\ntheta 0 2 theta\na 2 3 phi\ns 5 1 shared\n"
        );
        let back = ParamVector::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, p);

        assert!(ParamVector::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(ParamVector::read_checkpoint(&b"nope\n"[..]).is_err());
    }
}
