//! Deterministic keyword-and-slot instruction parser.

use super::{Plan, Vocabulary};
use crate::types::Location;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Word<'v> {
    Pick,
    Place,
    Deliver,
    Person,
    Source,
    Object(&'v str),
    Location(Location),
    Other,
}

const FILLER: &[&str] = &["the", "a", "an", "of", "my", "your", "this", "that"];

fn classify<'v>(word: &str, vocab: &'v Vocabulary) -> Word<'v> {
    let has = |list: &[String]| list.iter().any(|w| w == word);
    if let Some((label, _)) = vocab.objects.iter().find(|(l, syns)| *l == word || has(syns)) {
        return Word::Object(label);
    }
    if let Some((loc, _)) = vocab.locations.iter().find(|(l, syns)| l.as_str() == word || has(syns)) {
        return Word::Location(*loc);
    }
    if has(&vocab.pick_verbs) {
        Word::Pick
    } else if has(&vocab.place_verbs) {
        Word::Place
    } else if has(&vocab.deliver_verbs) {
        Word::Deliver
    } else if has(&vocab.persons) {
        Word::Person
    } else if has(&vocab.source_markers) {
        Word::Source
    } else {
        Word::Other
    }
}

/// Extracts (verb, object, source, destination or person) slots from an
/// English instruction. Returns `None` when a required slot is missing or
/// the instruction names both a destination and a person.
pub fn rule_parse(instruction: &str, vocab: &Vocabulary) -> Option<Plan> {
    let lower = instruction.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()).collect();
    let classes: Vec<Word> = words.iter().map(|w| classify(w, vocab)).collect();

    let verb = classes
        .iter()
        .position(|c| matches!(c, Word::Pick | Word::Place | Word::Deliver))?;
    let (obj_at, object) = classes.iter().enumerate().find_map(|(i, c)| match c {
        Word::Object(label) => Some((i, *label)),
        _ => None,
    })?;

    let marked = |i: usize| {
        words[..i]
            .iter()
            .rev()
            .zip(classes[..i].iter().rev())
            .find(|(w, _)| !FILLER.contains(w))
            .is_some_and(|(_, c)| *c == Word::Source)
    };
    let locations: Vec<(usize, Location)> = classes
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match c {
            Word::Location(l) => Some((i, *l)),
            _ => None,
        })
        .collect();
    let (src_at, source) = locations
        .iter()
        .copied()
        .find(|(i, _)| marked(*i))
        .or_else(|| locations.first().copied())?;
    let destination = locations.iter().copied().find(|(i, _)| *i != src_at);
    let person = classes.iter().position(|c| *c == Word::Person);
    let delivers = classes.contains(&Word::Deliver);

    let mut trace = vec![
        format!("verb '{}'", words[verb]),
        format!("object '{}' -> {object}", words[obj_at]),
        format!("source '{}' -> {source}", words[src_at]),
    ];
    match (destination, person) {
        (Some(_), Some(_)) => None,
        (Some((i, dest)), None) => {
            trace.push(format!("destination '{}' -> {dest}", words[i]));
            trace.push("pattern: pick then place".into());
            Some(Plan::pick_place(object, source, dest, &trace.join("; ")))
        }
        (None, Some(i)) => {
            trace.push(format!("recipient '{}' -> handover", words[i]));
            trace.push("pattern: pick then handover".into());
            Some(Plan::pick_handover(object, source, &trace.join("; ")))
        }
        (None, None) if delivers => {
            trace.push("recipient implied by the verb -> handover".into());
            trace.push("pattern: pick then handover".into());
            Some(Plan::pick_handover(object, source, &trace.join("; ")))
        }
        (None, None) => None,
    }
}
