//! Seed prompts, budgeted model inputs and few-shot prompts.

use clbd_core::corpus::{Direction, NodeType};
use clbd_core::embedding::CharNgramProvider;
use clbd_core::prompting::{
    compose_model_input, fewshot_prompt, seed_prompt, FewShotMode, FewShotPool, TemplateReference, WhitespaceTokenizer,
};
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::build_dataset;

fn main() -> clbd_core::Result<()> {
    println!("{}", seed_prompt("data augmentation", NodeType::Task, Direction::Forward));
    println!("{}", seed_prompt("symbolic reasoning", NodeType::OtherScientificTerm, Direction::Backward));

    let prompt = seed_prompt("knowledge acquisition", NodeType::Method, Direction::Backward);
    let neighbors = vec!["episodic memory".to_string(), "continual learning".to_string()];
    let background = "current plms are trained with static data . new data keeps arriving .";
    for budget in [512, 16, 12] {
        let input = compose_model_input(&prompt, &neighbors, background, budget, &WhitespaceTokenizer);
        println!("budget {budget:>3}: {}", input.text);
    }

    let dataset = build_dataset(&synthetic_corpus(&SyntheticConfig::default()), Default::default())?;
    let provider = CharNgramProvider::default();
    let pool = FewShotPool::build(&dataset.node.train, &provider)?;
    let target = &dataset.node.test[0];
    let examples = pool.select(target, FewShotMode::Retrieved, 2, &provider, 0)?;
    println!("\n{}", fewshot_prompt(target, &examples, FewShotMode::Retrieved, target.task, None));

    println!("\n{}", serde_json::to_string_pretty(&TemplateReference::current())?);
    Ok(())
}
