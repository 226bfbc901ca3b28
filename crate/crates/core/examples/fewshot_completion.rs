//! Few-shot prompting against a scripted completion client with retry.

use std::sync::Arc;

use clbd_core::embedding::{CharNgramProvider, EmbeddingProvider};
use clbd_core::genmodels::{
    FewShotNodes, FewShotSampling, NodePredictor, RetryPolicy, RetryingClient, ScriptedClient,
};
use clbd_core::prompting::{FewShotMode, FewShotPool};
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::{build_dataset, model_input};
use clbd_core::Error;

fn main() -> clbd_core::Result<()> {
    let dataset = build_dataset(&synthetic_corpus(&SyntheticConfig::default()), Default::default())?;
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(CharNgramProvider::default());
    let pool = Arc::new(FewShotPool::build(&dataset.node.train, provider.as_ref())?);
    let target = &dataset.node.test[0];

    // one transient failure, then fifteen samples of which two are blank
    let mut samples: Vec<String> = (0..13).map(|i| format!("candidate idea {i}")).collect();
    samples.insert(3, "  ".into());
    samples.insert(7, String::new());
    let scripted = ScriptedClient::new("scripted-llm", vec![Err(Error::Retryable("rate limited".into())), Ok(samples)]);
    let policy = RetryPolicy { base_delay_ms: 1, ..RetryPolicy::default() };
    let nodes = FewShotNodes {
        client: RetryingClient::new(scripted, policy),
        pool,
        provider,
        mode: FewShotMode::Retrieved,
        examples: 3,
        seed: 0,
        sampling: FewShotSampling::default(),
    };
    let out = nodes.predict(target, &model_input(target, &[]))?;
    let calls = nodes.client.inner().calls();
    println!("{} calls; prompt sent:\n{}\n", calls.len(), calls[0].0);
    for o in &out {
        println!("  {} ({:.3})", o.text, o.score);
    }
    Ok(())
}
