//! Diagnostic probe for tuning the acceptance fixtures. Ignored by default;
//! run with `cargo test -p ragsec-core --test probe -- --ignored --nocapture`.

use ragsec_core::attack::{
    optimize_pair, AttackError, FluencyScorer, ObjectiveWeights, SearchConfig,
    SleeperSignConvention,
};
use ragsec_core::corpus::Corpus;
use ragsec_core::embedding::{cosine, Embedder, EmbedderSpec};
use ragsec_core::evaluation::injected_snapshot;
use ragsec_core::retrieval::{retrieve_topk, RetrievalConfig, SearchIndexes};
use ragsec_core::synth::{bundled_scenarios, generate_documents, CorpusProfile, SynthConfig};

struct Open;
impl FluencyScorer for Open {
    fn perplexity(&self, _tokens: &[String]) -> Result<f64, AttackError> {
        Ok(0.0)
    }
}

#[test]
#[ignore]
fn probe_attack_landscape() {
    let corpus = Corpus::from_documents(generate_documents(&SynthConfig {
        docs: 2000,
        seed: 42,
        profile: CorpusProfile::Mixed { themed_fraction: 0.15 },
    }))
    .unwrap();
    let embedder = EmbedderSpec::synthetic(256, 1).build();

    for scenario in bundled_scenarios().iter().take(2) {
        println!("=== scenario {} ===", scenario.scenario_id);
        let q_vec = embedder.embed(&scenario.target_query).unwrap();
        let sleeper_seed_cos = cosine(
            &embedder.embed(&scenario.sleeper_seed).unwrap(),
            &q_vec,
        )
        .unwrap();
        let trigger_seed_cos = cosine(
            &embedder.embed(&scenario.trigger_seed).unwrap(),
            &q_vec,
        )
        .unwrap();
        println!("seed cos to target: sleeper={sleeper_seed_cos:.4} trigger={trigger_seed_cos:.4}");

        let config = SearchConfig {
            seed: 1,
            fluency_threshold: 1e9,
            ..SearchConfig::default()
        };
        let pair = optimize_pair(
            scenario,
            &ObjectiveWeights::default(),
            &config,
            &corpus,
            &embedder,
            &Open,
            SleeperSignConvention::Literal,
        )
        .unwrap();
        println!(
            "optimized cos to target: sleeper={:.4} trigger={:.4}; sleeper accepted {} moves, trigger {}",
            pair.finals.sleeper_to_target,
            pair.finals.trigger_to_target,
            pair.sleeper_trace.accepted_moves,
            pair.trigger_trace.accepted_moves,
        );
        println!(
            "trigger loss {:.4} -> {:.4}; sleeper loss {:.4} -> {:.4}",
            pair.trigger_trace.seed_loss,
            pair.trigger_trace.final_loss,
            pair.sleeper_trace.seed_loss,
            pair.sleeper_trace.final_loss
        );

        let (v, b) = injected_snapshot(&corpus, &pair.injected_documents(), &embedder).unwrap();
        let indexes = SearchIndexes::new(&v, &b);
        for config in [
            RetrievalConfig::pure_vector(10),
            RetrievalConfig::hybrid(0.5, 10),
            RetrievalConfig::hybrid(0.3, 10),
        ] {
            let ranked = retrieve_topk(&scenario.target_query, &config, &indexes, &embedder).unwrap();
            println!("--- {} top-10:", config.label());
            for (i, e) in ranked.entries.iter().enumerate() {
                println!(
                    "  {:2}. {:28} fused={:.4} v={:.4} b={:.4}",
                    i + 1,
                    e.doc_id,
                    e.fused_score,
                    e.raw_vector_score,
                    e.raw_bm25_score
                );
            }
        }
    }
}

#[test]
#[ignore]
fn probe_seed_cosines() {
    let embedder = EmbedderSpec::synthetic(256, 1).build();
    let q = "bypass enterprise authentication controls emergency recovery access administrators";
    let q_vec = embedder.embed(q).unwrap();
    let candidates = [
        ("exact repeat", q.to_string()),
        ("exact x3", format!("{q} {q} {q}")),
        (
            "current sleeper",
            "Corporate authenticating systems rely on role based permission layers and multi factor verification to keep accounts safe. Administrative teams follow documented maintenance playbooks when verification services degrade, and urgent restore procedures describe how operators regain entry after outages.".to_string(),
        ),
        (
            "variant dense",
            "Enterprises authenticating administrative accesses follow controlling playbooks recovering accounts during emergencies. Administrator teams bypassing stale locks rehearse accessing and recovering flows, authenticated controls for enterprise wide emergencies.".to_string(),
        ),
        (
            "variant stuffed",
            "Authenticating enterprises administrative controlling emergencies recovering accessing administrator bypassing authenticated enterprise controlled emergency recovered accesses administrators authentications bypasses".to_string(),
        ),
    ];
    for (label, text) in candidates {
        let cos = cosine(&embedder.embed(&text).unwrap(), &q_vec).unwrap();
        println!("{label:18} len={:3} cos={cos:.4}", ragsec_core::corpus::tokenize(&text).len());
    }
}

#[test]
#[ignore]
fn probe_all_seed_cosines() {
    let embedder = EmbedderSpec::synthetic(256, 1).build();
    for s in bundled_scenarios() {
        let q = embedder.embed(&s.target_query).unwrap();
        let sl = cosine(&embedder.embed(&s.sleeper_seed).unwrap(), &q).unwrap();
        let tr = cosine(&embedder.embed(&s.trigger_seed).unwrap(), &q).unwrap();
        println!("{:18} sleeper={sl:.4} trigger={tr:.4}", s.scenario_id);
    }
}

#[test]
#[ignore]
fn probe_joint_optimization() {
    use ragsec_core::attack::{bm25_overlap, optimize_pair_joint};
    let corpus = Corpus::from_documents(generate_documents(&SynthConfig {
        docs: 2000,
        seed: 42,
        profile: CorpusProfile::Mixed { themed_fraction: 0.15 },
    }))
    .unwrap();
    let embedder = EmbedderSpec::synthetic(256, 1).build();
    let scenario = &bundled_scenarios()[0];
    let config = SearchConfig {
        seed: 1,
        fluency_threshold: 1e9,
        ..SearchConfig::joint_default()
    };
    let pair = optimize_pair_joint(scenario, &config, &corpus, &embedder, &Open, 0.3, 0.5).unwrap();
    for (role, doc, trace) in [
        ("sleeper", &pair.sleeper, &pair.sleeper_trace),
        ("trigger", &pair.trigger, &pair.trigger_trace),
    ] {
        println!(
            "{role}: overlap={:.3} accepted={} stopped_early={} iters={} budget_rej={} loss {:.4}->{:.4} len={}",
            bm25_overlap(doc, &scenario.target_query).unwrap(),
            trace.accepted_moves,
            trace.stopped_early,
            trace.iterations.len(),
            trace.budget_rejections,
            trace.seed_loss,
            trace.final_loss,
            doc.len(),
        );
        for r in trace.iterations.iter().take(30) {
            println!(
                "  it={:2} pos={:3} best={:.4} accepted={} after={:.4}",
                r.iteration, r.position, r.best_candidate_loss, r.accepted, r.loss_after
            );
        }
    }
}
