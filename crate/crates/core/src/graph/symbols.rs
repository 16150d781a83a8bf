use std::collections::HashMap;

use crate::error::GraphError;

use super::{shape_string, SymDim};

/// Shape symbols with recorded equalities (union-find) and optional bindings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymbolTable {
    index: HashMap<String, usize>,
    names: Vec<String>,
    parent: Vec<usize>,
    values: Vec<Option<usize>>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: &str) {
        if !self.index.contains_key(name) {
            let i = self.names.len();
            self.index.insert(name.to_string(), i);
            self.names.push(name.to_string());
            self.parent.push(i);
            self.values.push(None);
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn root(&self, mut i: usize) -> usize {
        while self.parent[i] != i {
            i = self.parent[i];
        }
        i
    }

    fn id(&self, name: &str) -> Result<usize, GraphError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownSymbol(name.to_string()))
    }

    /// Records `a == b`.
    pub fn equate(&mut self, a: &str, b: &str) -> Result<(), GraphError> {
        self.declare(a);
        self.declare(b);
        let (ra, rb) = (self.root(self.id(a)?), self.root(self.id(b)?));
        if ra == rb {
            return Ok(());
        }
        let merged = match (self.values[ra], self.values[rb]) {
            (Some(x), Some(y)) if x != y => {
                return Err(GraphError::Invalid(format!(
                    "symbols `{a}` = {x} and `{b}` = {y} cannot be equal"
                )))
            }
            (x, y) => x.or(y),
        };
        self.parent[rb] = ra;
        self.values[ra] = merged;
        Ok(())
    }

    pub fn bind(&mut self, name: &str, value: usize) -> Result<(), GraphError> {
        if value == 0 {
            return Err(GraphError::Invalid(format!("symbol `{name}` bound to 0")));
        }
        self.declare(name);
        let r = self.root(self.id(name)?);
        match self.values[r] {
            Some(v) if v != value => Err(GraphError::Invalid(format!(
                "symbol `{name}` already bound to {v}, not {value}"
            ))),
            _ => {
                self.values[r] = Some(value);
                Ok(())
            }
        }
    }

    /// Drops all bindings, keeping declarations and equalities.
    pub fn clear_bindings(&mut self) {
        self.values.iter_mut().for_each(|v| *v = None);
    }

    pub fn value(&self, name: &str) -> Option<usize> {
        let i = *self.index.get(name)?;
        self.values[self.root(i)]
    }

    pub fn same_class(&self, a: &str, b: &str) -> bool {
        if a == b {
            return true;
        }
        match (self.index.get(a), self.index.get(b)) {
            (Some(&x), Some(&y)) => self.root(x) == self.root(y),
            _ => false,
        }
    }

    fn resolve(&self, d: &SymDim) -> Option<usize> {
        match d {
            SymDim::Const(n) => Some(*n),
            SymDim::Sym(s) => self.value(s),
        }
    }

    /// Provable equality: equal values, or symbols in one equality class.
    /// A symbol against an unrelated symbol or constant is not provably equal.
    pub fn dims_equal(&self, a: &SymDim, b: &SymDim) -> bool {
        match (self.resolve(a), self.resolve(b)) {
            (Some(x), Some(y)) => x == y,
            _ => match (a, b) {
                (SymDim::Sym(x), SymDim::Sym(y)) => self.same_class(x, y),
                _ => false,
            },
        }
    }

    pub fn shapes_equal(&self, a: &[SymDim], b: &[SymDim]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| self.dims_equal(x, y))
    }

    /// Right-aligned broadcast of two shapes.
    pub fn broadcast(&self, a: &[SymDim], b: &[SymDim]) -> Result<Vec<SymDim>, GraphError> {
        let rank = a.len().max(b.len());
        let one = SymDim::Const(1);
        let mut out = Vec::with_capacity(rank);
        for i in 0..rank {
            let x = if i + a.len() >= rank {
                &a[i + a.len() - rank]
            } else {
                &one
            };
            let y = if i + b.len() >= rank {
                &b[i + b.len() - rank]
            } else {
                &one
            };
            let d = if self.dims_equal(x, y) {
                x.clone()
            } else if x.is_one() {
                y.clone()
            } else if y.is_one() {
                x.clone()
            } else {
                return Err(GraphError::Unify {
                    a: shape_string(a),
                    b: shape_string(b),
                });
            };
            out.push(d);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equalities_and_bindings() {
        let mut s = SymbolTable::new();
        s.declare("b");
        s.declare("c");
        let (b, c) = (SymDim::from("b"), SymDim::from("c"));
        assert!(!s.dims_equal(&b, &c));
        assert!(!s.dims_equal(&b, &SymDim::Const(4)));
        s.bind("b", 4).unwrap();
        s.bind("c", 4).unwrap();
        assert!(s.dims_equal(&b, &c));
        assert!(s.dims_equal(&b, &SymDim::Const(4)));
        s.clear_bindings();
        s.equate("b", "c").unwrap();
        assert!(s.dims_equal(&b, &c));
        s.bind("b", 3).unwrap();
        assert_eq!(s.value("c"), Some(3));
        assert!(s.bind("c", 5).is_err());
    }

    #[test]
    fn broadcast_rules() {
        let s = SymbolTable::new();
        let sh = |v: &[usize]| v.iter().map(|&n| SymDim::Const(n)).collect::<Vec<_>>();
        assert_eq!(
            s.broadcast(&sh(&[1, 20]), &sh(&[4, 20])).unwrap(),
            sh(&[4, 20])
        );
        assert_eq!(s.broadcast(&sh(&[8]), &sh(&[2, 8])).unwrap(), sh(&[2, 8]));
        assert!(s.broadcast(&sh(&[3]), &sh(&[4])).is_err());
    }
}
