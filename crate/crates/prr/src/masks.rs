//! Binary task masks and the schedules that drive top-down module training.
//!
//! A mask selects the subset of tasks a module trains on. Schedules order
//! masks from coarse (all tasks) to fine (single tasks); the Walsh variant
//! derives intermediate granularities from the sign pattern of a
//! sequency-ordered Hadamard matrix.

use std::fmt;

/// A binary vector over the task list; `1` selects a task into a module's
/// training subset. Always nonempty with at least one bit set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskMask {
    bits: Vec<bool>,
}

impl TaskMask {
    pub fn new(bits: Vec<bool>) -> TaskMask {
        assert!(!bits.is_empty(), "mask must cover at least one task");
        assert!(bits.iter().any(|&b| b), "mask must select at least one task");
        TaskMask { bits }
    }

    pub fn all_ones(n_tasks: usize) -> TaskMask {
        TaskMask::new(vec![true; n_tasks])
    }

    pub fn one_hot(n_tasks: usize, task: usize) -> TaskMask {
        assert!(task < n_tasks, "task index out of range");
        let mut bits = vec![false; n_tasks];
        bits[task] = true;
        TaskMask { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_set(&self, task: usize) -> bool {
        self.bits[task]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Indices of the selected tasks, in task order.
    pub fn selected(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

impl fmt::Display for TaskMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            write!(f, "{}", if b { '1' } else { '0' })?;
        }
        Ok(())
    }
}

/// One schedule entry: which level/slot a module occupies and the mask it
/// trains under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledMask {
    pub level: u32,
    pub index: u32,
    pub mask: TaskMask,
}

impl ScheduledMask {
    /// Display label: `L0` for the root, `L<level><index>` below it.
    pub fn label(&self) -> String {
        if self.level == 0 {
            "L0".to_string()
        } else {
            format!("L{}{}", self.level, self.index)
        }
    }
}

/// An ordered, top-down list of masks: the first is always all ones and
/// levels never decrease.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSchedule {
    entries: Vec<ScheduledMask>,
}

impl MaskSchedule {
    fn from_entries(entries: Vec<ScheduledMask>) -> MaskSchedule {
        assert!(!entries.is_empty(), "schedule must not be empty");
        assert!(
            entries[0].mask.bits().iter().all(|&b| b),
            "first mask must select every task"
        );
        assert!(
            entries.windows(2).all(|w| w[0].level <= w[1].level),
            "levels must be non-decreasing"
        );
        MaskSchedule { entries }
    }

    pub fn entries(&self) -> &[ScheduledMask] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Human-readable rows (`label mask`) for run manifests.
    pub fn manifest_rows(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| format!("{} {}", e.label(), e.mask))
            .collect()
    }
}

/// The all-tasks mask alone; the schedule a from-scratch baseline trains
/// under.
pub fn root_only_schedule(n_tasks: usize) -> MaskSchedule {
    assert!(n_tasks >= 1, "need at least one task");
    MaskSchedule::from_entries(vec![ScheduledMask {
        level: 0,
        index: 1,
        mask: TaskMask::all_ones(n_tasks),
    }])
}

/// The two-level schedule: the all-ones mask followed by the `n` one-hot
/// masks in task order.
pub fn two_level_schedule(n_tasks: usize) -> MaskSchedule {
    assert!(n_tasks >= 1, "need at least one task");
    let mut entries = vec![ScheduledMask {
        level: 0,
        index: 1,
        mask: TaskMask::all_ones(n_tasks),
    }];
    for task in 0..n_tasks {
        entries.push(ScheduledMask {
            level: 1,
            index: task as u32 + 1,
            mask: TaskMask::one_hot(n_tasks, task),
        });
    }
    MaskSchedule::from_entries(entries)
}

/// Masks derived from the sign pattern of the sequency-ordered
/// Walsh–Hadamard matrix.
///
/// Row 0 (sequency 0, all `+1`) yields the all-ones mask. Every later row
/// `r` splits the tasks into its `+1` positions and its `-1` positions; each
/// nonempty side becomes one mask at level `r`, so granularity refines with
/// sequency.
pub fn walsh_schedule(n_tasks: usize) -> MaskSchedule {
    assert!(
        n_tasks >= 2 && n_tasks.is_power_of_two(),
        "task count must be a power of two >= 2, got {n_tasks}"
    );
    let rows = sequency_ordered_hadamard(n_tasks);
    let mut entries = vec![ScheduledMask {
        level: 0,
        index: 1,
        mask: TaskMask::all_ones(n_tasks),
    }];
    for (r, row) in rows.iter().enumerate().skip(1) {
        let mut index = 1;
        for sign in [1i8, -1] {
            let bits: Vec<bool> = row.iter().map(|&v| v == sign).collect();
            if bits.iter().any(|&b| b) {
                entries.push(ScheduledMask {
                    level: r as u32,
                    index,
                    mask: TaskMask::new(bits),
                });
                index += 1;
            }
        }
    }
    MaskSchedule::from_entries(entries)
}

/// The one-hot mask selecting only the newest task after an append.
pub fn new_task_mask(n_tasks_after_append: usize) -> TaskMask {
    assert!(n_tasks_after_append >= 1, "need at least one task");
    TaskMask::one_hot(n_tasks_after_append, n_tasks_after_append - 1)
}

/// The `n x n` Hadamard matrix (entries `+1`/`-1`) with rows in sequency
/// order: row `r` has exactly `r` sign changes.
pub fn sequency_ordered_hadamard(n: usize) -> Vec<Vec<i8>> {
    assert!(n.is_power_of_two() && n >= 1, "order must be a power of two");
    // Sylvester construction, then sort rows by sign-change count. The
    // sequencies 0..n-1 each occur exactly once, so the order is total.
    let mut rows = vec![vec![1i8]];
    let mut size = 1;
    while size < n {
        let mut next = Vec::with_capacity(size * 2);
        for row in &rows {
            let mut top = row.clone();
            top.extend(row.iter().copied());
            next.push(top);
        }
        for row in &rows {
            let mut bottom = row.clone();
            bottom.extend(row.iter().map(|v| -v));
            next.push(bottom);
        }
        rows = next;
        size *= 2;
    }
    rows.sort_by_key(|row| sign_changes(row));
    rows
}

fn sign_changes(row: &[i8]) -> usize {
    row.windows(2).filter(|w| w[0] != w[1]).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> TaskMask {
        TaskMask::new(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn two_level_for_two_tasks_matches_the_protocol_masks() {
        let schedule = two_level_schedule(2);
        let masks: Vec<&TaskMask> = schedule.entries().iter().map(|e| &e.mask).collect();
        assert_eq!(masks, vec![&mask(&[1, 1]), &mask(&[1, 0]), &mask(&[0, 1])]);
        assert_eq!(schedule.entries()[0].label(), "L0");
        assert_eq!(schedule.entries()[1].label(), "L11");
        assert_eq!(schedule.entries()[2].label(), "L12");
    }

    #[test]
    fn two_level_degenerate_single_task() {
        let schedule = two_level_schedule(1);
        let masks: Vec<&TaskMask> = schedule.entries().iter().map(|e| &e.mask).collect();
        assert_eq!(masks, vec![&mask(&[1]), &mask(&[1])]);
    }

    #[test]
    fn two_level_four_tasks_has_five_masks() {
        let schedule = two_level_schedule(4);
        assert_eq!(schedule.len(), 5);
        assert_eq!(schedule.entries()[0].mask, mask(&[1, 1, 1, 1]));
        for task in 0..4 {
            assert_eq!(schedule.entries()[task + 1].mask, TaskMask::one_hot(4, task));
        }
    }

    #[test]
    fn two_level_level_one_covers_every_task_exactly_once() {
        for n in 1..8 {
            let schedule = two_level_schedule(n);
            let mut counts = vec![0usize; n];
            for entry in schedule.entries().iter().skip(1) {
                for t in entry.mask.selected() {
                    counts[t] += 1;
                }
            }
            assert!(counts.iter().all(|&c| c == 1), "n={n}: {counts:?}");
        }
    }

    #[test]
    #[should_panic]
    fn two_level_rejects_zero_tasks() {
        two_level_schedule(0);
    }

    #[test]
    fn hadamard_rows_are_in_sequency_order() {
        for n in [1usize, 2, 4, 8, 16] {
            let rows = sequency_ordered_hadamard(n);
            for (r, row) in rows.iter().enumerate() {
                assert_eq!(sign_changes(row), r, "n={n} row={r}");
            }
        }
    }

    #[test]
    fn walsh_two_tasks_equals_two_level() {
        assert_eq!(walsh_schedule(2), two_level_schedule(2));
    }

    #[test]
    fn walsh_four_tasks_splits_the_alternating_row() {
        let schedule = walsh_schedule(4);
        // sequency-3 row is [1,-1,1,-1]
        let level3: Vec<&TaskMask> = schedule
            .entries()
            .iter()
            .filter(|e| e.level == 3)
            .map(|e| &e.mask)
            .collect();
        assert_eq!(level3, vec![&mask(&[1, 0, 1, 0]), &mask(&[0, 1, 0, 1])]);
    }

    #[test]
    fn walsh_four_tasks_has_seven_masks() {
        assert_eq!(walsh_schedule(4).len(), 7);
    }

    #[test]
    fn walsh_rows_partition_into_two_disjoint_nonempty_sets() {
        for n in [2usize, 4, 8] {
            let schedule = walsh_schedule(n);
            for level in 1..n as u32 {
                let masks: Vec<&TaskMask> = schedule
                    .entries()
                    .iter()
                    .filter(|e| e.level == level)
                    .map(|e| &e.mask)
                    .collect();
                assert_eq!(masks.len(), 2, "n={n} level={level}");
                let a = masks[0].selected();
                let b = masks[1].selected();
                assert!(!a.is_empty() && !b.is_empty());
                assert!(a.iter().all(|t| !b.contains(t)));
                assert_eq!(a.len() + b.len(), n);
            }
        }
    }

    #[test]
    #[should_panic]
    fn walsh_rejects_non_power_of_two() {
        walsh_schedule(3);
    }

    #[test]
    fn new_task_masks() {
        assert_eq!(new_task_mask(3), mask(&[0, 0, 1]));
        assert_eq!(new_task_mask(1), mask(&[1]));
        assert_eq!(new_task_mask(5), mask(&[0, 0, 0, 0, 1]));
    }

    #[test]
    #[should_panic]
    fn empty_mask_is_rejected() {
        TaskMask::new(vec![false, false]);
    }

    #[test]
    fn display_prints_bit_rows() {
        assert_eq!(mask(&[1, 0, 1]).to_string(), "101");
    }

    proptest! {
        #[test]
        fn every_schedule_mask_is_nonempty_and_first_is_all_ones(n in 1usize..10) {
            let schedule = two_level_schedule(n);
            prop_assert!(schedule.entries()[0].mask.bits().iter().all(|&b| b));
            for entry in schedule.entries() {
                prop_assert!(entry.mask.bits().iter().any(|&b| b));
            }
            prop_assert_eq!(schedule.len(), n + 1);
        }
    }
}
