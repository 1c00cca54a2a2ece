//! Terminal oracle: shows both descriptions and reads 0, 1 or 2.

use std::io::{BufRead, Write};

use prefrl_core::oracle::{PreferenceLabel, PromptBundle};

#[derive(Debug, thiserror::Error)]
pub enum HumanError {
    #[error("input closed before an answer was given")]
    Eof,
    #[error("stdin is not an interactive terminal")]
    NotInteractive,
    #[error("terminal io error: {0}")]
    Io(#[from] std::io::Error),
}

pub struct HumanOracle<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> HumanOracle<R, W> {
    pub fn new(input: R, output: W) -> Self {
        HumanOracle { input, output }
    }

    pub fn compare(&mut self, bundle: &PromptBundle) -> Result<PreferenceLabel, HumanError> {
        writeln!(self.output, "{}", bundle.full_text())?;
        let mut line = String::new();
        loop {
            write!(self.output, "your answer (0, 1 or 2): ")?;
            self.output.flush()?;
            line.clear();
            if self.input.read_line(&mut line)? == 0 {
                return Err(HumanError::Eof);
            }
            let choice = match line.trim() {
                "0" => PreferenceLabel::from_answer_digit(0),
                "1" => PreferenceLabel::from_answer_digit(1),
                "2" => PreferenceLabel::from_answer_digit(2),
                _ => None,
            };
            match choice {
                Some(label) => return Ok(label),
                None => writeln!(self.output, "please type 0, 1 or 2")?,
            }
        }
    }
}
