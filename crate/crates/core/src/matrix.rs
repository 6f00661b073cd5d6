use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real value per (layer, head), row-major by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMatrix {
    pub n_layers: usize,
    pub n_heads: usize,
    pub values: Vec<f64>,
}

impl HeadMatrix {
    pub fn zeros(n_layers: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            values: vec![0.0; n_layers * n_heads],
        }
    }

    pub fn from_values(n_layers: usize, n_heads: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_layers * n_heads {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {n_layers}x{n_heads} matrix",
                values.len()
            )));
        }
        Ok(Self {
            n_layers,
            n_heads,
            values,
        })
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.n_heads + head]
    }

    pub fn set(&mut self, layer: usize, head: usize, v: f64) {
        self.values[layer * self.n_heads + head] = v;
    }

    pub fn same_shape(&self, other: &HeadMatrix) -> Result<()> {
        if (self.n_layers, self.n_heads) != (other.n_layers, other.n_heads)
            || self.values.len() != other.values.len()
        {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.n_layers, self.n_heads, other.n_layers, other.n_heads
            )));
        }
        Ok(())
    }

    /// `(layer, head, value)` sorted by descending `|value|`, ties by index.
    pub fn ranked_by_magnitude(&self) -> Vec<(usize, usize, f64)> {
        let mut out: Vec<(usize, usize, f64)> = (0..self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| (l, h)))
            .map(|(l, h)| (l, h, self.get(l, h)))
            .collect();
        out.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()).then((a.0, a.1).cmp(&(b.0, b.1))));
        out
    }

    /// Rectangular CSV: header `layer,h0,h1,...`, one row per layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for h in 0..self.n_heads {
            s.push_str(&format!(",h{h}"));
        }
        s.push('\n');
        for l in 0..self.n_layers {
            s.push_str(&l.to_string());
            for h in 0..self.n_heads {
                s.push_str(&format!(",{}", self.get(l, h)));
            }
            s.push('\n');
        }
        s
    }
}
