//! Layer topology notation `{prelude}+{core}R{loops}+{coda}`, e.g. `4+8R2+4`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerPlan {
    pub l_pre: usize,
    pub l_core: usize,
    pub n_loop: usize,
    pub l_coda: usize,
    /// `false` for a plain `N`-layer stack written as a bare integer.
    pub recursive: bool,
}

impl LayerPlan {
    pub fn recursive(l_pre: usize, l_core: usize, n_loop: usize, l_coda: usize) -> Result<Self> {
        for (name, v) in [
            ("prelude", l_pre),
            ("core", l_core),
            ("loop count", n_loop),
            ("coda", l_coda),
        ] {
            if v == 0 {
                return Err(Error::Range(format!("{name} must be at least 1")));
            }
        }
        Ok(Self {
            l_pre,
            l_core,
            n_loop,
            l_coda,
            recursive: true,
        })
    }

    pub fn vanilla(layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Range("layer count must be at least 1".into()));
        }
        Ok(Self {
            l_pre: 0,
            l_core: layers,
            n_loop: 1,
            l_coda: 0,
            recursive: false,
        })
    }

    /// Layers in the unrolled computation graph.
    pub fn n_compute(&self) -> usize {
        self.l_pre + self.l_core * self.n_loop + self.l_coda
    }

    /// Layers with distinct parameters when the core is shared.
    pub fn n_unique(&self) -> usize {
        self.l_pre + self.l_core + self.l_coda
    }

    /// Percentage reduction in non-embedding parameters relative to an
    /// unshared model of the same compute depth, assuming every layer costs
    /// the same.
    pub fn param_reduction(&self) -> f64 {
        100.0 * (1.0 - self.n_unique() as f64 / self.n_compute() as f64)
    }
}

pub fn parse_plan(s: &str) -> Result<LayerPlan> {
    s.parse()
}

pub fn param_reduction(plan: &LayerPlan) -> f64 {
    plan.param_reduction()
}

/// One-decimal percentage, rounding halves away from zero (31.25 → "31.3").
/// `format!("{:.1}")` would round half to even.
pub fn format_percent(pct: f64) -> String {
    format!("{:.1}", (pct * 10.0).round() / 10.0)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn int(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected a decimal integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                message: "integer too large".into(),
            })
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(&b) if b == c => {
                self.pos += 1;
                Ok(())
            }
            Some(&b) => Err(self.error(format!(
                "expected '{}', found '{}'",
                c as char,
                (b as char).escape_default()
            ))),
            None => Err(self.error(format!("expected '{}', found end of input", c as char))),
        }
    }
}

impl FromStr for LayerPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cur = Cursor {
            bytes: s.as_bytes(),
            pos: 0,
        };
        let first = cur.int()?;
        if cur.pos == s.len() {
            return LayerPlan::vanilla(first);
        }
        cur.expect(b'+')?;
        let core = cur.int()?;
        cur.expect(b'R')?;
        let loops = cur.int()?;
        cur.expect(b'+')?;
        let coda = cur.int()?;
        if cur.pos != s.len() {
            return Err(cur.error("trailing characters"));
        }
        LayerPlan::recursive(first, core, loops, coda)
    }
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.recursive {
            write!(
                f,
                "{}+{}R{}+{}",
                self.l_pre, self.l_core, self.n_loop, self.l_coda
            )
        } else {
            write!(f, "{}", self.l_core)
        }
    }
}
