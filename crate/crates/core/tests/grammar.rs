mod common;

use common::*;
use hoi_grpo::grammar::{check_format, parse_output, render, serialize_output};
use hoi_grpo::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn generated_outputs_conform() {
    let mut r = rng(1);
    for _ in 0..2_000 {
        let o = random_output(&mut r);
        assert!(check_format(&o.raw_text), "{}", o.raw_text);
        assert!(oracle_check_format(&o.raw_text));
        assert_eq!(reparse(&o), o);
    }
}

#[test]
fn agrees_with_regex_recognizer_on_mutations() {
    let mut r = rng(2);
    let mut n_valid = 0;
    for _ in 0..5_000 {
        let text = mutate(&random_output(&mut r).raw_text, &mut r);
        let got = check_format(&text);
        assert_eq!(got, oracle_check_format(&text), "{text:?}");
        n_valid += got as usize;
    }
    // both classes must be exercised
    assert!(n_valid > 500 && n_valid < 4_500, "{n_valid}");
}

#[test]
fn random_bytes_never_panic() {
    let mut r = rng(3);
    for _ in 0..5_000 {
        let len = r.gen_range(0..=4096);
        let bytes: Vec<u8> = (0..len).map(|_| r.gen()).collect();
        let text = String::from_utf8_lossy(&bytes);
        let o = parse_output(&text);
        assert_eq!(o.format_valid, check_format(&text));
        assert_eq!(o.raw_text, text);
        if !o.format_valid {
            assert!(o.triplets.is_empty() && o.trace.is_empty());
        }
    }
}

#[test]
fn hand_written_cases() {
    let ok = "<think>a</think><answer>(human, hold, cup | 0,0,1,1 | 0.25,0.25,0.5,0.5)</answer>";
    assert!(check_format(ok));
    let cases = [
        ("empty", ""),
        ("no answer", "<think>a</think>"),
        ("reversed blocks", "<answer>(human, hold, cup | 0,0,1,1 | 0,0,1,1)</answer><think>a</think>"),
        ("text before", "x<think>a</think><answer>(human, hold, cup | 0,0,1,1 | 0,0,1,1)</answer>"),
        ("text between", "<think>a</think>x<answer>(human, hold, cup | 0,0,1,1 | 0,0,1,1)</answer>"),
        ("empty think", "<think> \n </think><answer>(human, hold, cup | 0,0,1,1 | 0,0,1,1)</answer>"),
        ("empty answer", "<think>a</think><answer>\n</answer>"),
        ("negative", "<think>a</think><answer>(human, hold, cup | -0,0,1,1 | 0,0,1,1)</answer>"),
        ("exponent", "<think>a</think><answer>(human, hold, cup | 0,0,1e0,1 | 0,0,1,1)</answer>"),
        ("leading dot", "<think>a</think><answer>(human, hold, cup | .1,0,1,1 | 0,0,1,1)</answer>"),
        ("trailing dot", "<think>a</think><answer>(human, hold, cup | 1.,0,1,1 | 0,0,1,1)</answer>"),
        ("above one", "<think>a</think><answer>(human, hold, cup | 0,0,1.01,1 | 0,0,1,1)</answer>"),
        ("degenerate", "<think>a</think><answer>(human, hold, cup | 0.5,0,0.5,1 | 0,0,1,1)</answer>"),
        ("three coords", "<think>a</think><answer>(human, hold, cup | 0,0,1 | 0,0,1,1)</answer>"),
        ("two labels", "<think>a</think><answer>(human, cup | 0,0,1,1 | 0,0,1,1)</answer>"),
        ("blank label", "<think>a</think><answer>(human, , cup | 0,0,1,1 | 0,0,1,1)</answer>"),
        ("nested paren", "<think>a</think><answer>(human, (hold), cup | 0,0,1,1 | 0,0,1,1)</answer>"),
        ("doubled tag", "<think>a<think></think><answer>(human, hold, cup | 0,0,1,1 | 0,0,1,1)</answer>"),
        ("stray close", "<think>a</think><answer>(human, hold, cup | 0,0,1,1 | 0,0,1,1)</answer></answer>"),
    ];
    for (name, text) in cases {
        assert!(!check_format(text), "{name}");
        assert!(!oracle_check_format(text), "oracle: {name}");
    }
}

#[test]
fn tolerant_whitespace_parses_like_canonical() {
    let text = "  \n<think>\n  look at the cup  \n\n then the hand\n</think>\n\t<answer>\n( person ,  hold , cup|0 , 0.0 , 1 , 1.0|0.25,0.25, 0.5,0.5 )\n\n</answer>\n";
    let o = parse_output(text);
    assert!(o.format_valid);
    assert_eq!(o.trace.steps, vec!["look at the cup", "then the hand"]);
    assert_eq!(o.triplets.len(), 1);
    assert_eq!(o.triplets[0].subject_label, "person");
    assert_eq!(o.triplets[0].object_box, BoundingBox::new(0.25, 0.25, 0.5, 0.5));
    let canonical = serialize_output(&o).unwrap();
    assert_eq!(parse_output(&canonical).triplets, o.triplets);
    assert_eq!(serialize_output(&parse_output(&canonical)).unwrap(), canonical);
}

#[test]
fn serialize_rejects_invalid_outputs() {
    assert!(serialize_output(&StructuredOutput::invalid("x")).is_err());
    let mut o = random_output(&mut rng(4));
    o.triplets[0].verb_label = " padded ".into();
    assert!(serialize_output(&o).is_err());
}

proptest! {
    #[test]
    fn parse_inverts_render(seed in any::<u64>()) {
        let o = random_output(&mut rng(seed));
        let text = render(&o.trace, &o.triplets);
        let back = parse_output(&text);
        prop_assert!(back.format_valid);
        prop_assert_eq!(&back.trace, &o.trace);
        prop_assert_eq!(&back.triplets, &o.triplets);
        prop_assert_eq!(serialize_output(&back).unwrap(), text);
    }

    #[test]
    fn arbitrary_strings_agree_with_oracle(text in "\\PC{0,200}") {
        prop_assert_eq!(check_format(&text), oracle_check_format(&text));
    }

    #[test]
    fn format_reward_is_binary(seed in any::<u64>()) {
        let mut r = rng(seed);
        let text = mutate(&random_output(&mut r).raw_text, &mut r);
        let f = reward::format_reward(&text);
        prop_assert!(f == 0.0 || f == 1.0);
        prop_assert_eq!(f == 1.0, check_format(&text));
    }
}
