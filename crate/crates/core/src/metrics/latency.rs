//! Delay-based latency metrics: consecutive wait, average proportion and
//! average lagging.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimtError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Read,
    Write,
}

impl Action {
    pub fn symbol(self) -> char {
        match self {
            Action::Read => 'R',
            Action::Write => 'W',
        }
    }

    pub fn index(self) -> usize {
        match self {
            Action::Read => 0,
            Action::Write => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::Read
        } else {
            Action::Write
        }
    }
}

pub fn actions_to_string(actions: &[Action]) -> String {
    actions.iter().map(|a| a.symbol()).collect()
}

pub fn parse_actions(s: &str) -> Result<Vec<Action>> {
    s.chars()
        .enumerate()
        .map(|(i, c)| match c {
            'R' => Ok(Action::Read),
            'W' => Ok(Action::Write),
            other => Err(SimtError::Parse {
                offset: i,
                detail: format!("unknown action symbol {other:?}"),
            }),
        })
        .collect()
}

/// Consecutive-wait count after each action: +1 on READ, reset on WRITE.
pub fn consecutive_wait_trace(actions: &[Action]) -> Vec<usize> {
    let mut c = 0;
    actions
        .iter()
        .map(|a| {
            match a {
                Action::Read => c += 1,
                Action::Write => c = 0,
            }
            c
        })
        .collect()
}

pub fn max_consecutive_wait(actions: &[Action]) -> usize {
    consecutive_wait_trace(actions).into_iter().max().unwrap_or(0)
}

/// Number of source tokens read at every WRITE.
pub fn delays_from_actions(actions: &[Action]) -> Vec<usize> {
    let mut read = 0;
    let mut g = Vec::new();
    for a in actions {
        match a {
            Action::Read => read += 1,
            Action::Write => g.push(read),
        }
    }
    g
}

fn check_delays(g: &[usize], src_len: usize, tgt_len: usize) -> Result<()> {
    if g.is_empty() || tgt_len == 0 {
        return Err(SimtError::Empty("delay sequence".into()));
    }
    if g.len() != tgt_len {
        return Err(SimtError::Contract(format!("{} delays for {tgt_len} target tokens", g.len())));
    }
    if g.iter().any(|&d| d == 0 || d > src_len) {
        return Err(SimtError::Contract(format!("delays {g:?} outside [1, {src_len}]")));
    }
    if g.windows(2).any(|w| w[1] < w[0]) {
        return Err(SimtError::Contract(format!("delays {g:?} are not non-decreasing")));
    }
    Ok(())
}

/// `sum(g) / (|src| * |tgt|)`.
pub fn average_proportion(g: &[usize], src_len: usize, tgt_len: usize) -> Result<f64> {
    check_delays(g, src_len, tgt_len)?;
    Ok(g.iter().sum::<usize>() as f64 / (src_len * tgt_len) as f64)
}

/// Average lagging: mean of `g(t) - (t-1) / r` over `t <= tau`, where
/// `r = |tgt| / |src|` and `tau` is the first target index whose delay
/// covers the whole source (or `|tgt|` if none does).
pub fn average_lagging(g: &[usize], src_len: usize, tgt_len: usize) -> Result<f64> {
    check_delays(g, src_len, tgt_len)?;
    let rate = tgt_len as f64 / src_len as f64;
    let tau = g.iter().position(|&d| d == src_len).map(|i| i + 1).unwrap_or(tgt_len);
    let total: f64 = g[..tau]
        .iter()
        .enumerate()
        .map(|(t, &d)| d as f64 - t as f64 / rate)
        .sum();
    Ok(total / tau as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consecutive_wait_examples() {
        let a = parse_actions("RRW").unwrap();
        assert_eq!(consecutive_wait_trace(&a), vec![1, 2, 0]);
        let a = parse_actions("RWRWRW").unwrap();
        assert_eq!(consecutive_wait_trace(&a), vec![1, 0, 1, 0, 1, 0]);
        assert_eq!(max_consecutive_wait(&parse_actions("RRRRW").unwrap()), 4);
        assert!(parse_actions("RX").is_err());
    }

    #[test]
    fn average_proportion_examples() {
        assert_eq!(average_proportion(&[3, 3, 3], 3, 3).unwrap(), 1.0);
        assert!((average_proportion(&[1, 2, 3], 3, 3).unwrap() - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(average_proportion(&[2, 3, 4, 4], 4, 4).unwrap(), 0.8125);
        assert!(average_proportion(&[], 3, 0).is_err());
    }

    #[test]
    fn average_lagging_examples() {
        assert_eq!(average_lagging(&[2, 3, 4, 4], 4, 4).unwrap(), 2.0);
        assert_eq!(average_lagging(&[3, 3, 3], 3, 3).unwrap(), 3.0);
        // Terms: 1, 0.5, 0, -0.5, 0, -0.5, 0, 0.5.
        assert_eq!(average_lagging(&[1, 1, 1, 1, 2, 2, 3, 4], 4, 8).unwrap(), 0.125);
    }

    #[test]
    fn lagging_can_be_negative() {
        // Writer far ahead of the proportional reader.
        let g = [1, 1, 1, 1, 1, 1, 1, 4];
        assert_eq!(average_lagging(&g, 4, 8).unwrap(), -3.0 / 8.0);
    }

    #[test]
    fn invalid_delays_are_rejected() {
        assert!(average_lagging(&[2, 1], 2, 2).is_err());
        assert!(average_lagging(&[0, 1], 2, 2).is_err());
        assert!(average_lagging(&[1, 3], 2, 2).is_err());
        assert!(average_lagging(&[1, 2], 2, 3).is_err());
    }
}
