//! Turns an English instruction into a validated plan.
//!
//!     cargo run --example plan_from_instruction -- "bring me the mug from the table"
//!
//! With `--prompt` the few-shot prompt for a remote model is printed too,
//! and `--bnf` prints the grammar the plan text is checked against.

use kitchenbot::plan::{build_prompt, parse_plan, rule_parse, PlanGrammar, PromptBundle, Vocabulary};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--bnf") {
        print!("{}", PlanGrammar::new().to_bnf());
        return;
    }
    let show_prompt = args.iter().any(|a| a == "--prompt");
    let words: Vec<&str> = args.iter().filter(|a| !a.starts_with("--")).map(String::as_str).collect();
    let instruction = if words.is_empty() {
        "grab the mug from the table and bring it to me".to_string()
    } else {
        words.join(" ")
    };

    let vocab = Vocabulary::default_vocabulary();
    if show_prompt {
        let prompt = build_prompt(&PromptBundle::default_bundle(), &instruction).expect("non-empty instruction");
        println!("{prompt}\n");
    }
    let Some(plan) = rule_parse(&instruction, &vocab) else {
        println!("no plan for {instruction:?}");
        std::process::exit(1);
    };
    let text = plan.to_json();
    // the same check a model completion goes through
    let checked = parse_plan(&text, &vocab).expect("rule parser emits valid plans");
    println!("instruction: {instruction}");
    println!("reasoning:   {}", checked.chain_of_thought);
    for (i, a) in checked.actions.iter().enumerate() {
        println!("  {}. {a}", i + 1);
    }
    println!("{text}");
}
