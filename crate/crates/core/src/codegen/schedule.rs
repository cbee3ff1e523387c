//! Dependency-ordered build waves.

use std::collections::{BTreeMap, BTreeSet};

use crate::codebase::ModuleKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleMode {
    #[default]
    Dependencies,
    /// Everything in one wave. Test-only.
    Flat,
}

/// What each module needs to be stable before it can start.
pub fn dependencies(kind: ModuleKind) -> &'static [ModuleKind] {
    use ModuleKind::*;
    match kind {
        Task => &[],
        Client => &[Task],
        Strategy => &[Task],
        Server => &[Task, Strategy],
        Runner => &[Task, Client, Strategy, Server],
    }
}

pub fn dependency_graph() -> BTreeMap<ModuleKind, BTreeSet<ModuleKind>> {
    ModuleKind::ALL
        .into_iter()
        .map(|k| (k, dependencies(k).iter().copied().collect()))
        .collect()
}

/// Kahn layering: wave n holds every node whose dependencies all sit in
/// earlier waves. Returns `None` on a cycle or a dependency outside the graph.
pub fn layer<N: Ord + Copy>(graph: &BTreeMap<N, BTreeSet<N>>) -> Option<Vec<Vec<N>>> {
    let mut placed: BTreeSet<N> = BTreeSet::new();
    let mut waves = Vec::new();
    while placed.len() < graph.len() {
        let wave: Vec<N> = graph
            .iter()
            .filter(|(n, deps)| !placed.contains(*n) && deps.iter().all(|d| placed.contains(d)))
            .map(|(n, _)| *n)
            .collect();
        if wave.is_empty() {
            return None;
        }
        placed.extend(wave.iter().copied());
        waves.push(wave);
    }
    Some(waves)
}

pub fn schedule(mode: ScheduleMode) -> Vec<Vec<ModuleKind>> {
    match mode {
        ScheduleMode::Flat => vec![ModuleKind::ALL.to_vec()],
        ScheduleMode::Dependencies => layer(&dependency_graph()).expect("module graph is acyclic"),
    }
}

/// Every node appears once and after all of its dependencies.
pub fn is_topological<N: Ord + Copy>(waves: &[Vec<N>], graph: &BTreeMap<N, BTreeSet<N>>) -> bool {
    let mut wave_of = BTreeMap::new();
    for (i, w) in waves.iter().enumerate() {
        for n in w {
            if wave_of.insert(*n, i).is_some() {
                return false;
            }
        }
    }
    wave_of.len() == graph.len()
        && graph.iter().all(|(n, deps)| {
            deps.iter().all(|d| match (wave_of.get(d), wave_of.get(n)) {
                (Some(a), Some(b)) => a < b,
                _ => false,
            })
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ModuleKind::*;

    #[test]
    fn four_waves() {
        assert_eq!(schedule(ScheduleMode::Dependencies), vec![vec![Task], vec![Client, Strategy], vec![Server], vec![Runner]]);
        assert!(is_topological(&schedule(ScheduleMode::Dependencies), &dependency_graph()));
    }

    #[test]
    fn flat_mode() {
        let w = schedule(ScheduleMode::Flat);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].len(), 5);
        assert!(!is_topological(&w, &dependency_graph()));
    }

    #[test]
    fn cycle_detected() {
        let g = BTreeMap::from([(1, BTreeSet::from([2])), (2, BTreeSet::from([1]))]);
        assert_eq!(layer(&g), None);
    }
}
