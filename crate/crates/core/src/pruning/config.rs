use serde::{Deserialize, Serialize};

use super::PruningError;

/// Weight-name pattern: `*` matches any run of characters and `|`
/// separates alternatives, e.g. `fc*|out.w`.
pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    pattern.split('|').any(|alt| glob_match(alt.trim().as_bytes(), name.as_bytes()))
}

fn glob_match(pat: &[u8], s: &[u8]) -> bool {
    let (mut p, mut i) = (0, 0);
    let mut backtrack: Option<(usize, usize)> = None;
    while i < s.len() {
        if p < pat.len() && pat[p] == b'*' {
            backtrack = Some((p, i));
            p += 1;
        } else if p < pat.len() && pat[p] == s[i] {
            p += 1;
            i += 1;
        } else if let Some((bp, bi)) = backtrack {
            p = bp + 1;
            i = bi + 1;
            backtrack = Some((bp, bi + 1));
        } else {
            return false;
        }
    }
    pat[p..].iter().all(|&c| c == b'*')
}

/// One named sparsity configuration: a level per weight-name pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub name: String,
    pub levels: Vec<(String, f64)>,
}

impl SparsityConfig {
    pub fn new(name: impl Into<String>, levels: Vec<(String, f64)>) -> Result<Self, PruningError> {
        let config = Self {
            name: name.into(),
            levels,
        };
        for &(_, s) in &config.levels {
            super::score::check_sparsity(s)?;
        }
        Ok(config)
    }

    /// Level for `weight`; exactly one pattern must match.
    pub fn level_for(&self, weight: &str) -> Result<f64, PruningError> {
        let mut hits = self
            .levels
            .iter()
            .filter(|(p, _)| pattern_matches(p, weight));
        match (hits.next(), hits.next()) {
            (Some(&(_, s)), None) => Ok(s),
            (None, _) => Err(PruningError::Unmatched {
                config: self.name.clone(),
                weight: weight.to_string(),
            }),
            (Some(_), Some(_)) => Err(PruningError::AmbiguousMatch {
                config: self.name.clone(),
                weight: weight.to_string(),
            }),
        }
    }

    pub fn is_full(&self) -> bool {
        self.levels.iter().all(|&(_, s)| s == 0.0)
    }

    /// Size-weighted mean sparsity over `(name, element_count)` weights.
    pub fn average_sparsity(&self, weights: &[(&str, usize)]) -> Result<f64, PruningError> {
        let mut pruned = 0.0;
        let mut total = 0.0;
        for &(name, size) in weights {
            pruned += self.level_for(name)? * size as f64;
            total += size as f64;
        }
        Ok(if total == 0.0 { 0.0 } else { pruned / total })
    }
}

/// Ordered configurations `[C₀, C₁, …, C_L]`; `C₀` is the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    configs: Vec<SparsityConfig>,
}

impl SparsityPlan {
    pub fn new(configs: Vec<SparsityConfig>) -> Result<Self, PruningError> {
        let first = configs.first().ok_or(PruningError::EmptyPlan)?;
        if !first.is_full() {
            return Err(PruningError::FirstConfigNotFull(first.name.clone()));
        }
        for (i, c) in configs.iter().enumerate() {
            if configs[..i].iter().any(|o| o.name == c.name) {
                return Err(PruningError::DuplicateConfig(c.name.clone()));
            }
        }
        Ok(Self { configs })
    }

    pub fn configs(&self) -> &[SparsityConfig] {
        &self.configs
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.configs.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.configs.iter().map(|c| c.name.as_str()).collect()
    }

    /// Checks that every prunable weight is matched by exactly one pattern
    /// in every configuration.
    pub fn validate(&self, prunable: &[&str]) -> Result<(), PruningError> {
        for c in &self.configs {
            for w in prunable {
                c.level_for(w)?;
            }
        }
        Ok(())
    }

    /// Indices of `C₁…C_L` in ascending average sparsity (stable on ties).
    pub fn sparse_order(&self, weights: &[(&str, usize)]) -> Result<Vec<usize>, PruningError> {
        let mut keyed = Vec::with_capacity(self.configs.len().saturating_sub(1));
        for i in 1..self.configs.len() {
            keyed.push((self.configs[i].average_sparsity(weights)?, i));
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(keyed.into_iter().map(|(_, i)| i).collect())
    }
}

/// Weight-name pattern of the recurrent layer class.
pub const LSTM_PATTERN: &str = "lstm*";
/// Weight-name pattern of the fully connected layer class.
pub const FC_PATTERN: &str = "fc*|proj*|out*";

/// The three-level plan used by the toy experiments: `Large` (dense),
/// `Medium` (LSTM 70%, FC 0%) and `Small` (LSTM 90%, FC 50%).
pub fn build_toy_plan() -> SparsityPlan {
    let cfg = |name: &str, lstm: f64, fc: f64| {
        SparsityConfig::new(
            name,
            vec![(LSTM_PATTERN.to_string(), lstm), (FC_PATTERN.to_string(), fc)],
        )
        .expect("levels are in range")
    };
    SparsityPlan::new(vec![
        cfg("Large", 0.0, 0.0),
        cfg("Medium", 0.70, 0.0),
        cfg("Small", 0.90, 0.50),
    ])
    .expect("Large is dense")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_patterns() {
        assert!(pattern_matches("lstm*", "lstm0.w"));
        assert!(pattern_matches("fc*|out*", "out.w"));
        assert!(pattern_matches("*.w", "fc1.w"));
        assert!(!pattern_matches("*.w", "fc1.b"));
        assert!(pattern_matches("fc1.w", "fc1.w"));
        assert!(!pattern_matches("fc1.w", "fc10.w"));
        assert!(pattern_matches("a*b*c", "axxbyyc"));
        assert!(!pattern_matches("a*b*c", "axxbyy"));
    }

    #[test]
    fn toy_plan_levels() {
        let plan = build_toy_plan();
        assert_eq!(plan.names(), vec!["Large", "Medium", "Small"]);
        let large = &plan.configs()[0];
        assert_eq!(large.level_for("lstm0.w").unwrap(), 0.0);
        assert_eq!(large.level_for("out.w").unwrap(), 0.0);
        let medium = &plan.configs()[1];
        assert_eq!(medium.level_for("lstm0.w").unwrap(), 0.70);
        assert_eq!(medium.level_for("proj.w").unwrap(), 0.0);
        let small = &plan.configs()[2];
        assert_eq!(small.level_for("lstm1.w").unwrap(), 0.90);
        assert_eq!(small.level_for("fc2.w").unwrap(), 0.50);
    }

    #[test]
    fn toy_plan_covers_every_toy_weight_once() {
        let plan = build_toy_plan();
        plan.validate(&["lstm0.w", "proj.w", "out.w", "fc0.w", "fc1.w", "fc2.w"])
            .unwrap();
    }

    #[test]
    fn match_errors() {
        let c = SparsityConfig::new("X", vec![("fc*".into(), 0.5), ("*.w".into(), 0.1)]).unwrap();
        assert!(matches!(c.level_for("fc0.w"), Err(PruningError::AmbiguousMatch { .. })));
        assert!(matches!(c.level_for("lstm0.b"), Err(PruningError::Unmatched { .. })));
        assert!(SparsityConfig::new("Y", vec![("*".into(), 1.0)]).is_err());
    }

    #[test]
    fn plan_requires_dense_first() {
        let sparse = SparsityConfig::new("S", vec![("*".into(), 0.5)]).unwrap();
        let dense = SparsityConfig::new("D", vec![("*".into(), 0.0)]).unwrap();
        assert!(matches!(
            SparsityPlan::new(vec![sparse.clone()]),
            Err(PruningError::FirstConfigNotFull(_))
        ));
        assert!(SparsityPlan::new(vec![]).is_err());
        assert!(SparsityPlan::new(vec![dense.clone(), dense.clone()]).is_err());
        assert!(SparsityPlan::new(vec![dense, sparse]).is_ok());
    }

    #[test]
    fn sparse_order_is_ascending() {
        let mk = |n: &str, s: f64| SparsityConfig::new(n, vec![("*".into(), s)]).unwrap();
        let plan = SparsityPlan::new(vec![mk("L", 0.0), mk("S", 0.9), mk("M", 0.5)]).unwrap();
        assert_eq!(plan.sparse_order(&[("w", 10)]).unwrap(), vec![2, 1]);
    }

    #[test]
    fn average_sparsity_weights_by_size() {
        let plan = build_toy_plan();
        let small = &plan.configs()[2];
        let avg = small
            .average_sparsity(&[("lstm0.w", 900), ("out.w", 100)])
            .unwrap();
        assert!((avg - 0.86).abs() < 1e-12);
    }
}
