use crate::transcript::{escape_field, unescape_field, Batch, Turn};

/// Closing sentence of every batch request.
pub const REQUEST_INSTRUCTION: &str =
    "Code each turn. Output for each: `Turn <id>` then `Codes: ...` then `Justification: ...`.";

/// Line the agent is asked to end each turn block with.
pub const SELF_CHECK_LINE: &str = "Checked against the decision tree.";

/// Lists the batch's turns as `Turn <id> (<speaker>): <text>` lines, with
/// field escapes so each turn stays on one line.
pub fn render_batch_request(batch: &Batch<'_>, self_check: bool) -> String {
    let mut out = String::new();
    for turn in batch.turns {
        out.push_str(&format!(
            "Turn {} ({}): {}\n",
            turn.turn_id,
            escape_field(&turn.speaker),
            escape_field(&turn.text)
        ));
    }
    out.push('\n');
    out.push_str(REQUEST_INSTRUCTION);
    if self_check {
        out.push_str(&format!(
            "\nEnd each turn block with the line \"{SELF_CHECK_LINE}\""
        ));
    }
    out
}

/// Recovers the turns from a batch request, or `None` when the message is
/// not one.
pub fn parse_batch_request(message: &str) -> Option<Vec<Turn>> {
    if !message.contains(REQUEST_INSTRUCTION) {
        return None;
    }
    let turns = message
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("Turn ")?;
            let (id, rest) = rest.split_once(" (")?;
            let turn_id = id.parse().ok()?;
            let (speaker, text) = rest.split_once("): ")?;
            Some(Turn::new(turn_id, unescape_field(speaker), unescape_field(text)))
        })
        .collect();
    Some(turns)
}
