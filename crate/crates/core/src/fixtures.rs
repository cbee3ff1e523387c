//! Toy federated-averaging codebase used for offline runs: logistic
//! regression on synthetic two-class point clouds, standard library only.

use std::collections::BTreeMap;

use crate::codebase::{CodebaseVersion, ModuleKind, Provenance};

pub const TOY_TASK: &str = include_str!("../assets/fixtures/toy_fedavg/task.py");
pub const TOY_CLIENT: &str = include_str!("../assets/fixtures/toy_fedavg/client_app.py");
pub const TOY_STRATEGY: &str = include_str!("../assets/fixtures/toy_fedavg/strategy.py");
pub const TOY_SERVER: &str = include_str!("../assets/fixtures/toy_fedavg/server_app.py");
pub const TOY_RUNNER: &str = include_str!("../assets/fixtures/toy_fedavg/run.py");

pub const TOY_NUM_CLIENTS: usize = 3;
pub const TOY_LOCAL_EPOCHS: usize = 2;
pub const TOY_LEARNING_RATE: f64 = 0.1;

pub fn toy_source(kind: ModuleKind) -> &'static str {
    match kind {
        ModuleKind::Task => TOY_TASK,
        ModuleKind::Client => TOY_CLIENT,
        ModuleKind::Strategy => TOY_STRATEGY,
        ModuleKind::Server => TOY_SERVER,
        ModuleKind::Runner => TOY_RUNNER,
    }
}

/// Strategy whose configure_evaluate selects no clients.
pub fn zero_results_strategy() -> String {
    TOY_STRATEGY.replace("return [(cid, {}) for cid in client_manager]", "return []")
}

/// Client whose fit raises on the first call.
pub fn crashing_client() -> String {
    TOY_CLIENT.replace(
        "        params, loss = train(",
        "        raise ValueError(\"slice indices must be integers\")\n        params, loss = train(",
    )
}

/// C_0 built from the toy sources, with optional per-module overrides.
pub fn toy_codebase(overrides: &[(ModuleKind, String)]) -> CodebaseVersion {
    let mut sources: BTreeMap<ModuleKind, (String, Provenance)> = ModuleKind::ALL
        .iter()
        .map(|&k| (k, (toy_source(k).to_string(), Provenance { agent_role: "fixture".into(), attempt: 1 })))
        .collect();
    for (k, src) in overrides {
        sources.get_mut(k).expect("all kinds present").0 = src.clone();
    }
    CodebaseVersion::integrate(&sources).expect("toy sources are complete")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_differ_from_base() {
        assert_ne!(zero_results_strategy(), TOY_STRATEGY);
        assert_ne!(crashing_client(), TOY_CLIENT);
        let c = toy_codebase(&[(ModuleKind::Strategy, zero_results_strategy())]);
        assert_eq!(c.file(ModuleKind::Strategy), zero_results_strategy());
        assert_eq!(c.file(ModuleKind::Task), TOY_TASK);
    }

    #[test]
    fn toy_sources_pass_tester_checks() {
        let symbols = crate::codegen::RequiredSymbols::shipped();
        for k in ModuleKind::ALL {
            let (ok, fb) = crate::codegen::tester_verify(k, toy_source(k), &crate::codegen::GrammarChecker, &symbols);
            assert!(ok, "{k:?}: {fb}");
        }
    }
}
