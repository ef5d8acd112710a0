use cmtm::analysis::{bleu_text, Smoothing};

struct Case {
    name: String,
    smoothing: Smoothing,
    expected: f64,
    refs: Vec<String>,
    hyps: Vec<String>,
}

fn cases() -> Vec<Case> {
    let text = include_str!("fixtures/bleu_cases.tsv");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            assert_eq!(cols.len(), 5, "{l}");
            let split = |s: &str| s.split(" ||| ").map(str::to_owned).collect::<Vec<_>>();
            Case {
                name: cols[0].to_owned(),
                smoothing: match cols[1] {
                    "none" => Smoothing::None,
                    "add1" => Smoothing::AddOne,
                    other => panic!("smoothing {other}"),
                },
                expected: cols[2].parse().unwrap(),
                refs: split(cols[3]),
                hyps: split(cols[4]),
            }
        })
        .collect()
}

#[test]
fn fixture_set_has_ten_cases() {
    let names: Vec<String> = cases().into_iter().map(|c| c.name).collect();
    assert_eq!(names.len(), 10);
    for needed in ["clipping_unsmoothed", "brevity_penalty", "disjoint"] {
        assert!(names.iter().any(|n| n == needed));
    }
}

#[test]
fn scorer_matches_fixtures() {
    for c in cases() {
        let got = bleu_text(&c.refs, &c.hyps, c.smoothing).unwrap().score;
        assert!((got - c.expected).abs() <= 0.01, "{}: {got} vs {}", c.name, c.expected);
    }
}
