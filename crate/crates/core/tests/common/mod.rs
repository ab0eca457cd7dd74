#![allow(dead_code)]

use cdl_core::dataset::Dataset;
use cdl_core::embeddings::PromptKind;
use cdl_core::synth::{synth_fixture, SynthFixture, SynthSpec};

pub fn synth_dataset(spec: &SynthSpec) -> (SynthFixture, Dataset) {
    let fx = synth_fixture(spec).unwrap();
    let concepts = fx.texts.select(&fx.concepts).unwrap();
    let names: Vec<String> = fx
        .categories
        .iter()
        .map(|c| {
            PromptKind::NameOnly
                .default_template()
                .replace("{category}", c)
        })
        .collect();
    let name_prompts = fx.texts.select(&names).unwrap();
    let ds = Dataset::assemble(
        "synth",
        &fx.images,
        &fx.labels,
        concepts,
        fx.w_llm.clone(),
        name_prompts,
    )
    .unwrap();
    (fx, ds)
}
