use super::{DataError, Result, UserSequence};

/// A prefix of one user's history and the item that follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub target: usize,
    pub target_timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitOptions {
    /// Prefixes keep only their most recent `max_len` items.
    pub max_len: usize,
    /// One training example per target position; otherwise only the last
    /// training target of each user.
    pub per_target: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Leave-one-out: the last item of each user is the test target, the one
/// before it the validation target, and positions `1..n-2` are training
/// targets.
pub fn split_leave_one_out(sequences: &[UserSequence], opts: SplitOptions) -> Result<Splits> {
    if opts.max_len == 0 {
        return Err(DataError::Invalid("sequence length limit must be positive".into()));
    }
    let mut out = Splits::default();
    for (u, seq) in sequences.iter().enumerate() {
        let n = seq.items.len();
        if n < 3 {
            return Err(DataError::TooFewInteractions { user: seq.user.clone(), count: n });
        }
        let example = |pos: usize| {
            let start = pos.saturating_sub(opts.max_len);
            Example {
                user: u,
                items: seq.items[start..pos].to_vec(),
                timestamps: seq.timestamps[start..pos].to_vec(),
                target: seq.items[pos],
                target_timestamp: seq.timestamps[pos],
            }
        };
        let train_targets = 1..n - 2;
        if opts.per_target {
            out.train.extend(train_targets.map(example));
        } else if let Some(last) = train_targets.last() {
            out.train.push(example(last));
        }
        out.valid.push(example(n - 2));
        out.test.push(example(n - 1));
    }
    Ok(out)
}
