mod common;

use klnx::corpus::Label;
use klnx::kln::KlnSize;
use klnx::llm::TemperatureMode;
use klnx::validate::{aggregate, CellKey, LineMatch, ValidateError, ValidationResult, DEFAULT_BUCKET_WIDTH};
use rand::Rng;

use common::engineered_results;
use common::oracle::table_recount_diffs;

fn assert_table_matches_recount(results: &[ValidationResult]) {
    let diffs = table_recount_diffs(results);
    assert!(diffs.is_empty(), "{diffs:#?}");
}

/// Histogram recount with the right-closed bucket rule written out.
fn recount_histogram(results: &[ValidationResult], cell: CellKey, width: f64) -> Vec<usize> {
    let n = (100.0 / width).ceil() as usize;
    let mut counts = vec![0; n];
    for r in results.iter().filter(|r| r.temperature_mode == cell.temperature_mode && r.size == cell.size) {
        for p in r.lines_a.iter().chain(&r.lines_b).filter_map(|m| m.location_percent) {
            let k = (0..n).find(|&k| p <= (k + 1) as f64 * width).unwrap();
            counts[k] += 1;
        }
    }
    counts
}

#[test]
fn engineered_dataset_uniform() {
    let results = engineered_results(1, 10, &|_, _, rng| rng.gen_bool(0.8));
    assert_table_matches_recount(&results);
}

#[test]
fn engineered_dataset_skewed_by_class() {
    let results = engineered_results(2, 10, &|gt, _, rng| match gt {
        Label::Clone => true,
        Label::NonClone => rng.gen_bool(0.3),
    });
    assert_table_matches_recount(&results);
    let (table, _) = aggregate(&results, None, DEFAULT_BUCKET_WIDTH).unwrap();
    for cell in table.cells.values() {
        assert_eq!(cell.clone_pairs.hits, cell.clone_pairs.total);
    }
}

#[test]
fn engineered_dataset_reads_98_percent() {
    // 50 results in the size-4/zero cell, exactly one with a wrong verdict.
    let results = engineered_results(3, 10, &|_, index, _| index != 17);
    assert_table_matches_recount(&results);
    let (table, _) = aggregate(&results, None, DEFAULT_BUCKET_WIDTH).unwrap();
    let cell = &table.cells[&CellKey {
        temperature_mode: TemperatureMode::Zero,
        size: KlnSize::Four,
    }];
    assert_eq!((cell.explanation.hits, cell.explanation.total), (49, 50));
    assert_eq!(cell.explanation.percent(), Some(98.0));
    assert!(table.to_markdown().contains("98%"));
}

#[test]
fn histogram_filters_to_one_cell() {
    let results = engineered_results(4, 10, &|_, _, _| true);
    let cell = CellKey {
        temperature_mode: TemperatureMode::Zero,
        size: KlnSize::Four,
    };
    let (_, hist) = aggregate(&results, Some(cell), DEFAULT_BUCKET_WIDTH).unwrap();
    assert_eq!(hist.counts, recount_histogram(&results, cell, DEFAULT_BUCKET_WIDTH));
    assert_eq!(hist.counts.len(), 40);
    let (_, all) = aggregate(&results, None, DEFAULT_BUCKET_WIDTH).unwrap();
    assert!(all.total() > hist.total());
}

#[test]
fn single_record_gives_one_cell() {
    let results = engineered_results(5, 1, &|_, _, _| true);
    let one = &results[..1];
    let (table, _) = aggregate(one, None, DEFAULT_BUCKET_WIDTH).unwrap();
    assert_eq!(table.cells.len(), 1);
    assert_eq!(table.to_csv().lines().count(), 1 + 4);
    assert!(matches!(aggregate(&[], None, 2.5), Err(ValidateError::Empty)));
}

#[test]
fn bucket_edges_are_right_closed() {
    let mut r = engineered_results(6, 1, &|_, _, _| true).remove(0);
    r.lines_a = [2.5, 2.6, 100.0]
        .iter()
        .map(|&p| LineMatch {
            extracted_line: "x".into(),
            matched: true,
            line_index: Some(1),
            location_percent: Some(p),
            occurrences: 1,
        })
        .collect();
    r.lines_b.clear();
    let (_, hist) = aggregate(&[r], None, DEFAULT_BUCKET_WIDTH).unwrap();
    assert_eq!((hist.counts[0], hist.counts[1], hist.counts[39]), (1, 1, 1));
}

#[test]
fn result_helper_is_deterministic() {
    let a = engineered_results(9, 2, &|_, _, rng| rng.gen_bool(0.5));
    let b = engineered_results(9, 2, &|_, _, rng| rng.gen_bool(0.5));
    assert_eq!(a, b);
    assert_eq!(a.len(), 2 * 2 * 2 * 5);
}
