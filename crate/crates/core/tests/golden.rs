mod common;

use common::golden;

#[test]
fn mcq_json_extraction() {
    assert!(golden::mcq().unwrap() >= 20);
}

#[test]
fn structured_cot_tags() {
    golden::structured_cot().unwrap();
}

#[test]
fn simplified_cot_tags() {
    golden::simplified_cot().unwrap();
}

#[test]
fn five_quality_scores() {
    golden::quality_scores().unwrap();
}

#[test]
fn answer_extraction_all_styles() {
    golden::answer_extraction().unwrap();
}
