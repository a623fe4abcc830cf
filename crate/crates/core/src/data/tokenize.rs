/// Lowercases and splits on whitespace, detaching punctuation into separate
/// tokens. An apostrophe followed by letters starts a clitic token, so
/// `"Kevin's"` becomes `kevin`, `'s`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.to_lowercase().chars().collect();
        let mut current = String::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_alphanumeric() {
                current.push(c);
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                let clitic = c == '\'' && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
                if clitic {
                    current.push(c);
                } else {
                    tokens.push(c.to_string());
                }
            }
            i += 1;
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn detaches_punctuation_and_clitics() {
        assert_eq!(tokenize("Kevin's room!"), ["kevin", "'s", "room", "!"]);
        assert_eq!(
            tokenize("Hello,   WORLD..."),
            ["hello", ",", "world", ".", ".", "."]
        );
        assert_eq!(tokenize("rock 'n' roll"), ["rock", "'n", "'", "roll"]);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n").is_empty());
    }

    proptest! {
        #[test]
        fn idempotent(text in "[a-zA-Z0-9 ',.!?éß-]{0,40}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
