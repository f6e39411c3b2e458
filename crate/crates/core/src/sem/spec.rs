use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Equation {
    pub dependent: String,
    pub predictors: Vec<String>,
}

/// A recursive path model: exogenous variables covary freely, residuals are
/// uncorrelated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathModelSpec {
    name: String,
    equations: Vec<Equation>,
}

impl PathModelSpec {
    pub fn new(name: impl Into<String>, equations: Vec<Equation>) -> Result<Self> {
        if equations.is_empty() {
            return Err(Error::Spec("model has no equations".into()));
        }
        let mut seen = HashSet::new();
        for eq in &equations {
            if !seen.insert(eq.dependent.as_str()) {
                return Err(Error::Spec(format!("{} appears twice as a dependent variable", eq.dependent)));
            }
            if eq.predictors.is_empty() {
                return Err(Error::Spec(format!("{} has no predictors", eq.dependent)));
            }
            let mut preds = HashSet::new();
            for p in &eq.predictors {
                if !preds.insert(p.as_str()) {
                    return Err(Error::Spec(format!("{p} listed twice as a predictor of {}", eq.dependent)));
                }
            }
        }
        let spec = PathModelSpec {
            name: name.into(),
            equations,
        };
        if let Some(cycle) = spec.find_cycle() {
            return Err(Error::CyclicModel(cycle));
        }
        Ok(spec)
    }

    /// Parses `DEP ~ A + B` lines; `#` starts a comment.
    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut equations = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (lhs, rhs) = line
                .split_once('~')
                .ok_or_else(|| Error::parse(name, lineno, "expected `DEP ~ PRED + ...`"))?;
            let dependent = lhs.trim();
            if !is_name(dependent) {
                return Err(Error::parse(name, lineno, format!("bad dependent variable `{dependent}`")));
            }
            let mut predictors = Vec::new();
            for term in rhs.split('+') {
                let term = term.trim();
                if !is_name(term) {
                    return Err(Error::parse(name, lineno, format!("bad predictor `{term}`")));
                }
                predictors.push(term.to_string());
            }
            equations.push(Equation {
                dependent: dependent.to_string(),
                predictors,
            });
        }
        Self::new(name, equations)
    }

    /// Loads a spec file; the model takes the file stem as its name.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        Self::parse(&text, name).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::parse(path.display().to_string(), line, message),
            other => other,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn equations(&self) -> &[Equation] {
        &self.equations
    }

    /// All variables in order of first appearance.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for eq in &self.equations {
            for v in std::iter::once(&eq.dependent).chain(&eq.predictors) {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
        }
        out
    }

    pub fn is_endogenous(&self, var: &str) -> bool {
        self.equations.iter().any(|e| e.dependent == var)
    }

    pub fn n_paths(&self) -> usize {
        self.equations.iter().map(|e| e.predictors.len()).sum()
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        let preds: HashMap<&str, &[String]> = self
            .equations
            .iter()
            .map(|e| (e.dependent.as_str(), e.predictors.as_slice()))
            .collect();
        // 0 unvisited, 1 on stack, 2 done
        let mut state: HashMap<&str, u8> = HashMap::new();
        let mut stack: Vec<&str> = Vec::new();

        fn visit<'a>(
            v: &'a str,
            preds: &HashMap<&'a str, &'a [String]>,
            state: &mut HashMap<&'a str, u8>,
            stack: &mut Vec<&'a str>,
        ) -> Option<Vec<String>> {
            match state.get(v) {
                Some(2) => return None,
                Some(1) => {
                    let start = stack.iter().position(|s| *s == v).unwrap_or(0);
                    let mut cycle: Vec<String> = stack[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(v.to_string());
                    cycle.reverse();
                    return Some(cycle);
                }
                _ => {}
            }
            state.insert(v, 1);
            stack.push(v);
            if let Some(ps) = preds.get(v) {
                for p in ps.iter() {
                    if let Some(c) = visit(p.as_str(), preds, state, stack) {
                        return Some(c);
                    }
                }
            }
            stack.pop();
            state.insert(v, 2);
            None
        }

        for eq in &self.equations {
            if let Some(c) = visit(eq.dependent.as_str(), &preds, &mut state, &mut stack) {
                return Some(c);
            }
        }
        None
    }
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '~' || c == '+')
}

impl fmt::Display for PathModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, eq) in self.equations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{} ~ {}", eq.dependent, eq.predictors.join(" + "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_two_equations() {
        let spec = PathModelSpec::parse("# comment\nINT ~ BE + SN + PBC\n\nBE ~ EC + NS  # trailing\n", "m3").unwrap();
        assert_eq!(spec.equations().len(), 2);
        assert_eq!(spec.variables(), ["INT", "BE", "SN", "PBC", "EC", "NS"]);
        assert!(spec.is_endogenous("BE"));
        assert!(!spec.is_endogenous("EC"));
        assert_eq!(spec.n_paths(), 5);
        assert_eq!(spec.to_string(), "INT ~ BE + SN + PBC\nBE ~ EC + NS");
    }

    #[test]
    fn rejects_cycles() {
        match PathModelSpec::parse("A ~ B\nB ~ C\nC ~ A\n", "cyc") {
            Err(Error::CyclicModel(c)) => {
                assert_eq!(c.first(), c.last());
                assert_eq!(c.len(), 4);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(PathModelSpec::parse("A ~ A", "self"), Err(Error::CyclicModel(_))));
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(
            PathModelSpec::parse("A ~ B\nA B\n", "m"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(PathModelSpec::parse("A ~ B +\n", "m"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(PathModelSpec::parse("A ~ B\nA ~ C\n", "m"), Err(Error::Spec(_))));
        assert!(matches!(PathModelSpec::parse("A ~ B + B\n", "m"), Err(Error::Spec(_))));
        assert!(matches!(PathModelSpec::parse("# nothing\n", "m"), Err(Error::Spec(_))));
    }
}
