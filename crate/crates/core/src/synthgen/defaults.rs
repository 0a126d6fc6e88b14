//! Configuration files shipped with the crate.
//!
//! Every loader here parses an embedded JSON document; the documents are
//! covered by unit tests so the `expect`s cannot fire in a released build.

use super::lupus::{LupusCriteria, PrevalenceTable};
use super::penalty::PenaltyWeightTable;
use super::schema::{Schema, UseCase};
use super::tree::{DecisionTree, DecisionTreeSpec};

pub const ANEMIA_SCHEMA: &str = include_str!("../../data/anemia_schema.json");
pub const ANEMIA_TREE: &str = include_str!("../../data/anemia_tree.json");
pub const LUPUS_SCHEMA: &str = include_str!("../../data/lupus_schema.json");
pub const LUPUS_CRITERIA: &str = include_str!("../../data/lupus_criteria.json");
pub const LUPUS_PREVALENCE: &str = include_str!("../../data/lupus_prevalence.json");
pub const LUPUS_PENALTY: &str = include_str!("../../data/lupus_penalty.json");

pub fn anemia_schema() -> Schema {
    Schema::from_json(ANEMIA_SCHEMA).expect("embedded anemia schema")
}

pub fn lupus_schema() -> Schema {
    Schema::from_json(LUPUS_SCHEMA).expect("embedded lupus schema")
}

pub fn schema(use_case: UseCase) -> Schema {
    match use_case {
        UseCase::Anemia => anemia_schema(),
        UseCase::Lupus => lupus_schema(),
    }
}

pub fn anemia_tree_spec() -> DecisionTreeSpec {
    DecisionTreeSpec::from_json(ANEMIA_TREE).expect("embedded anemia tree")
}

pub fn anemia_tree(schema: &Schema) -> DecisionTree {
    anemia_tree_spec()
        .compile(schema)
        .expect("embedded anemia tree matches embedded schema")
}

pub fn lupus_criteria() -> LupusCriteria {
    LupusCriteria::from_json(LUPUS_CRITERIA).expect("embedded lupus criteria")
}

pub fn lupus_prevalence() -> PrevalenceTable {
    PrevalenceTable::from_json(LUPUS_PREVALENCE).expect("embedded lupus prevalence")
}

pub fn penalty_table() -> PenaltyWeightTable {
    PenaltyWeightTable::from_json(LUPUS_PENALTY).expect("embedded penalty table")
}
