//! The line-oriented chat loop. Every turn is answered on its own, with no
//! history, matching the single-pair training format.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::run::{Loaded, Persona};

const STREAM: &str = "<chat stream>";

fn io(e: std::io::Error) -> Error {
    Error::io(STREAM, e)
}

/// Reads utterances from `input` until EOF or `/quit`, writing one greedy
/// response per line. `/persona` prints the persona's sentences.
pub fn chat<R: BufRead, W: Write>(
    loaded: &Loaded,
    persona: &Persona,
    max_new_tokens: usize,
    input: R,
    mut output: W,
) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(io)?;
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/persona" => {
                for s in persona.persona_lines() {
                    writeln!(output, "{s}").map_err(io)?;
                }
            }
            cmd if cmd.starts_with('/') => writeln!(output, "unknown command {cmd}; try /persona or /quit").map_err(io)?,
            utterance => {
                let g = loaded.generate(persona, utterance, max_new_tokens)?;
                writeln!(output, "{}", g.text).map_err(io)?;
            }
        }
        output.flush().map_err(io)?;
    }
    Ok(())
}
