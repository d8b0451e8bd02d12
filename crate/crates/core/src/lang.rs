//! Instruction templates, masked-word questions and the answer vocabulary.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Clause, Color, Connector, Goal, Item, ItemKind, Mention, Role};

pub const PAD: &str = "<pad>";
pub const MASK: &str = "<<question>>";
pub const NO_ANSWER: &str = "<<no_answer>>";

const FUNCTION_WORDS: [&str; 11] = ["put", "the", "next", "to", "pick", "up", "a", "open", "before", "after", "you"];
const NOUNS: [&str; 4] = ["ball", "box", "key", "door"];

/// Fixed token table; a token's id is its index.
pub fn vocabulary() -> &'static [&'static str] {
    static TABLE: std::sync::OnceLock<Vec<&'static str>> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let mut v = vec![PAD, MASK, NO_ANSWER];
        v.extend(FUNCTION_WORDS);
        v.extend(Color::ALL.iter().map(|c| c.name()));
        v.extend(NOUNS);
        v
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub const PAD: Token = Token(0);
    pub const MASK: Token = Token(1);
    pub const NO_ANSWER: Token = Token(2);

    pub fn of(word: &str) -> Result<Token, LexiconError> {
        vocabulary()
            .iter()
            .position(|w| *w == word)
            .map(|i| Token(i as u16))
            .ok_or_else(|| LexiconError::Unknown(word.to_string()))
    }

    pub fn text(self) -> &'static str {
        vocabulary()[self.0 as usize]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Colour words and object nouns: the words questions are asked about.
    pub fn is_content(self) -> bool {
        let w = self.text();
        Color::from_name(w).is_some() || NOUNS.contains(&w)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LexiconError {
    #[error("unknown token '{0}'")]
    Unknown(String),
    #[error("reserved token '{0}' inside an instruction")]
    Reserved(String),
    #[error("vocabulary file mismatch at line {line}: expected '{expected}', found '{found}'")]
    VocabMismatch { line: usize, expected: String, found: String },
    #[error("i/o error: {0}")]
    Io(String),
}

/// A tokenised goal. When built from a goal, each word also records which
/// clause entity it names.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    tokens: Vec<Token>,
    mentions: Vec<Option<Mention>>,
}

impl Instruction {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mention(&self, pos: usize) -> Option<Mention> {
        self.mentions.get(pos).copied().flatten()
    }

    /// Whitespace tokenisation of lowercase text; mention links are absent.
    pub fn parse(text: &str) -> Result<Instruction, LexiconError> {
        let tokens = text.split_whitespace().map(|w| Token::of(&w.to_lowercase())).collect::<Result<Vec<_>, _>>()?;
        let mentions = vec![None; tokens.len()];
        Ok(Instruction { tokens, mentions })
    }

    pub fn from_tokens(tokens: Vec<Token>) -> Instruction {
        let mentions = vec![None; tokens.len()];
        Instruction { tokens, mentions }
    }

    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

pub fn detokenize(tokens: &[Token]) -> String {
    tokens.iter().filter(|t| **t != Token::PAD).map(|t| t.text()).collect::<Vec<_>>().join(" ")
}

struct Builder {
    tokens: Vec<Token>,
    mentions: Vec<Option<Mention>>,
}

impl Builder {
    fn word(&mut self, w: &str) {
        self.tokens.push(Token::of(w).expect("template words are in the vocabulary"));
        self.mentions.push(None);
    }

    fn words(&mut self, ws: &str) {
        ws.split(' ').for_each(|w| self.word(w));
    }

    fn item(&mut self, it: Item, m: Mention) {
        for w in [it.color.name(), it.kind.name()] {
            self.word(w);
            *self.mentions.last_mut().unwrap() = Some(m);
        }
    }

    fn clause(&mut self, c: &Clause, idx: usize) {
        match *c {
            Clause::PutNextTo { moved, target } => {
                self.words("put the");
                self.item(moved, Mention { clause: idx, role: Role::Moved });
                self.words("next to the");
                self.item(target, Mention { clause: idx, role: Role::Target });
            }
            Clause::PickUp { item } => {
                self.words("pick up a");
                self.item(item, Mention { clause: idx, role: Role::Object });
            }
            Clause::Open { color } => {
                self.words("open the");
                let m = Some(Mention { clause: idx, role: Role::Door });
                self.word(color.name());
                *self.mentions.last_mut().unwrap() = m;
                self.word("door");
                *self.mentions.last_mut().unwrap() = m;
            }
        }
    }
}

/// Template fill for a goal.
pub fn instruct(goal: &Goal) -> Instruction {
    let mut b = Builder { tokens: Vec::new(), mentions: Vec::new() };
    match goal {
        Goal::Single(c) => b.clause(c, 0),
        Goal::Sequence(a, conn, c) => {
            b.clause(a, 0);
            b.words(match conn {
                Connector::Before => "before you",
                Connector::After => "after you",
            });
            b.clause(c, 1);
        }
    }
    Instruction { tokens: b.tokens, mentions: b.mentions }
}

/// An instruction with one content word replaced by the mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub tokens: Vec<Token>,
    /// The masked word.
    pub answer: Token,
    /// Position of the mask.
    pub position: usize,
}

impl Question {
    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }

    /// The instruction obtained by putting `answer` back at the mask.
    pub fn resubstitute(&self) -> Vec<Token> {
        let mut t = self.tokens.clone();
        t[self.position] = self.answer;
        t
    }

    /// Rebuilds a question from its text; the answer is supplied separately.
    pub fn parse(text: &str, answer: Token) -> Result<Question, LexiconError> {
        let tokens = text.split_whitespace().map(Token::of).collect::<Result<Vec<_>, _>>()?;
        let position = tokens
            .iter()
            .position(|&t| t == Token::MASK)
            .ok_or_else(|| LexiconError::Unknown(format!("no mask in '{text}'")))?;
        Ok(Question { tokens, answer, position })
    }
}

/// One question per colour or noun occurrence, left to right.
pub fn qg(instruction: &Instruction) -> Result<Vec<Question>, LexiconError> {
    let toks = instruction.tokens();
    if let Some(t) = toks.iter().find(|t| matches!(**t, Token::MASK | Token::NO_ANSWER)) {
        return Err(LexiconError::Reserved(t.text().into()));
    }
    Ok(toks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_content())
        .map(|(i, &t)| {
            let mut tokens = toks.to_vec();
            tokens[i] = Token::MASK;
            Question { tokens, answer: t, position: i }
        })
        .collect())
}

/// Ordered answer set: masked words by first occurrence, then no-answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVocab {
    answers: Vec<Token>,
}

impl AnswerVocab {
    pub fn from_answers(mut answers: Vec<Token>) -> AnswerVocab {
        answers.retain(|&t| t != Token::NO_ANSWER);
        let mut seen = Vec::new();
        for t in answers {
            if !seen.contains(&t) {
                seen.push(t);
            }
        }
        seen.push(Token::NO_ANSWER);
        AnswerVocab { answers: seen }
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn answers(&self) -> &[Token] {
        &self.answers
    }

    pub fn index_of(&self, t: Token) -> Option<usize> {
        self.answers.iter().position(|&a| a == t)
    }

    pub fn token(&self, index: usize) -> Token {
        self.answers[index]
    }

    pub fn no_answer_index(&self) -> usize {
        self.answers.len() - 1
    }
}

pub fn build_answer_vocab(corpus: &[Instruction]) -> Result<AnswerVocab, LexiconError> {
    let mut answers = Vec::new();
    for ins in corpus {
        answers.extend(qg(ins)?.into_iter().map(|q| q.answer));
    }
    if answers.is_empty() {
        log::warn!("no maskable words in a corpus of {} instructions; answer set is only no-answer", corpus.len());
    }
    Ok(AnswerVocab::from_answers(answers))
}

/// Writes the token table, one token per line.
pub fn write_vocab_file(mut w: impl Write) -> std::io::Result<()> {
    for t in vocabulary() {
        writeln!(w, "{t}")?;
    }
    Ok(())
}

/// Checks that a stored token table agrees with the built-in one.
pub fn check_vocab_file(r: impl BufRead) -> Result<(), LexiconError> {
    let vocab = vocabulary();
    let mut n = 0;
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| LexiconError::Io(e.to_string()))?;
        let expected = vocab.get(i).copied().unwrap_or("<end of table>");
        if line != expected {
            return Err(LexiconError::VocabMismatch { line: i + 1, expected: expected.into(), found: line });
        }
        n += 1;
    }
    if n != vocab.len() {
        return Err(LexiconError::VocabMismatch {
            line: n + 1,
            expected: vocab[n.min(vocab.len() - 1)].into(),
            found: "<end of file>".into(),
        });
    }
    Ok(())
}

/// Size of the word multiset intersection of two token sequences, ignoring
/// the mask and padding.
pub fn shared_words(a: &[Token], b: &[Token]) -> usize {
    let mut counts = vec![0i32; vocabulary().len()];
    for t in a.iter().filter(|t| !matches!(**t, Token::MASK | Token::PAD)) {
        counts[t.index()] += 1;
    }
    let mut shared = 0;
    for t in b.iter().filter(|t| !matches!(**t, Token::MASK | Token::PAD)) {
        if counts[t.index()] > 0 {
            counts[t.index()] -= 1;
            shared += 1;
        }
    }
    shared
}

/// Every item description, for enumerating templates.
pub fn all_items() -> Vec<Item> {
    ItemKind::ALL.iter().flat_map(|&k| Color::ALL.iter().map(move |&c| Item::new(k, c))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(ws: &[Token]) -> String {
        detokenize(ws)
    }

    #[test]
    fn templates() {
        let purple_ball = Item::new(ItemKind::Ball, Color::Purple);
        let blue_key = Item::new(ItemKind::Key, Color::Blue);
        let g = Goal::Single(Clause::PutNextTo { moved: purple_ball, target: blue_key });
        assert_eq!(instruct(&g).text(), "put the purple ball next to the blue key");
        assert_eq!(instruct(&Goal::Single(Clause::Open { color: Color::Green })).text(), "open the green door");
        let seq = Goal::Sequence(
            Clause::PutNextTo { moved: Item::new(ItemKind::Key, Color::Blue), target: Item::new(ItemKind::Box, Color::Red) },
            Connector::Before,
            Clause::Open { color: Color::Grey },
        );
        assert_eq!(instruct(&seq).text(), "put the blue key next to the red box before you open the grey door");
    }

    #[test]
    fn four_questions_for_put_next_to() {
        let ins = Instruction::parse("put the red ball next to the blue box").unwrap();
        let qs = qg(&ins).unwrap();
        assert_eq!(qs.len(), 4);
        assert_eq!(text(&qs[0].tokens), "put the <<question>> ball next to the blue box");
        assert_eq!(qs[0].answer.text(), "red");
        assert_eq!(qg(&Instruction::parse("open the green door").unwrap()).unwrap().len(), 2);
    }

    #[test]
    fn answer_vocab_orders() {
        let v = build_answer_vocab(&[Instruction::parse("open the red door").unwrap()]).unwrap();
        let words: Vec<_> = v.answers().iter().map(|t| t.text()).collect();
        assert_eq!(words, ["red", "door", NO_ANSWER]);
        let empty = build_answer_vocab(&[Instruction::parse("put the").unwrap()]).unwrap();
        assert_eq!(empty.answers(), &[Token::NO_ANSWER]);
    }

    #[test]
    fn unknown_words_are_lexicon_errors() {
        assert!(matches!(Instruction::parse("take the red box"), Err(LexiconError::Unknown(w)) if w == "take"));
        let masked = Instruction::from_tokens(vec![Token::of("open").unwrap(), Token::MASK]);
        assert!(matches!(qg(&masked), Err(LexiconError::Reserved(_))));
    }

    #[test]
    fn shared_word_count_is_multiset_intersection() {
        let a = Instruction::parse("put the red ball next to the blue box").unwrap();
        let b = Instruction::parse("put the red key next to the red box").unwrap();
        // put, the, the, red, next, to, box
        assert_eq!(shared_words(a.tokens(), b.tokens()), 7);
        assert_eq!(shared_words(b.tokens(), a.tokens()), 7);
    }

    #[test]
    fn vocab_file_round_trip() {
        let mut buf = Vec::new();
        write_vocab_file(&mut buf).unwrap();
        check_vocab_file(&buf[..]).unwrap();
        let mut bad = String::from_utf8(buf).unwrap().replacen("ball", "bell", 1);
        assert!(check_vocab_file(bad.as_bytes()).is_err());
        bad.truncate(10);
        assert!(check_vocab_file(bad.as_bytes()).is_err());
    }
}
