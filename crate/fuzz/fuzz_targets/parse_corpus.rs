#![no_main]

use klq_core::io::{format_tokens, parse_corpus, parse_token_line};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&size, rest)) = data.split_first() else {
        return;
    };
    let alphabet_size = usize::from(size % 30);
    if let Ok(text) = std::str::from_utf8(rest) {
        if let Ok(corpus) = parse_corpus(text, alphabet_size) {
            for line in corpus.iter().filter(|l| !l.is_empty()) {
                let text = format_tokens(line, alphabet_size);
                assert_eq!(&parse_token_line(&text, alphabet_size).unwrap(), line);
            }
        }
    }
});
