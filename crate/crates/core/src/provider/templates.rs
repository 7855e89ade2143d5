//! Bundled prompt templates. Placeholders are written `{name}` and every
//! placeholder must be bound when rendering.

use std::collections::BTreeMap;

use super::ProviderError;

pub struct Template {
    pub id: &'static str,
    pub text: &'static str,
}

pub const INITIAL_CAPTION: &str = "initial_caption";
pub const DETAILED_CAPTION: &str = "detailed_caption";
pub const QA_GENERATION: &str = "qa_generation";
pub const CAPTION_CORRECTION: &str = "caption_correction";
pub const OPTION_AUGMENTATION: &str = "option_augmentation";
pub const COT_CAPTION: &str = "cot_caption";
pub const COT_QA: &str = "cot_qa";
pub const QUALITY_CHECK: &str = "quality_check";
pub const DIFFICULTY: &str = "difficulty";
pub const STEP_VERIFY: &str = "step_verify";
pub const STEP_REWRITE: &str = "step_rewrite";
pub const TRANSCRIBE: &str = "transcribe";

pub const TEMPLATES: &[Template] = &[
    Template {
        id: INITIAL_CAPTION,
        text: "Listen to the attached 30-second music segment and write a short, surface-level caption \
(two or three sentences) covering genre, mood, prominent instruments and vocals. \
Do not guess tempo, key or chord names.",
    },
    Template {
        id: DETAILED_CAPTION,
        text: "You are a musicologist with deep knowledge of harmony, rhythm, arrangement and production. \
Write a detailed, multi-aspect caption of the attached music segment.\n\
Cover, where audible: genre and style, tempo and meter, key and harmonic movement, song structure, \
instrumentation and timbre, vocal character, lyrical content, dynamics and mix.\n\
Treat the measured attributes below as ground truth and state the tempo and key exactly as given:\n\
{metadata}\n\
A first-pass description of the segment, which may contain errors:\n\
{initial_caption}\n\
Write flowing prose, no lists.",
    },
    Template {
        id: QA_GENERATION,
        text: "You write multiple-choice listening questions about music.\n\
Target skill: {skill}\n\
Ground-truth attributes of the segment:\n\
{metadata}\n\
Reference caption:\n\
{caption}\n\
Write one question that can only be answered by listening and that exercises the target skill. \
Give exactly four options labelled (A) to (D), one per line, with a single correct option. \
Use this layout:\n\
Question: <question>\n\
(A) <option>\n\
(B) <option>\n\
(C) <option>\n\
(D) <option>\n\
Answer: (<letter>)",
    },
    Template {
        id: CAPTION_CORRECTION,
        text: "Revise the caption below so that it agrees with the measured attributes. \
Correct any wrong tempo, key, meter or chord statements, keep every correct detail, \
and add the lyrical themes where lyrics are available.\n\
Measured attributes:\n\
{metadata}\n\
Lyrics (may be empty):\n\
{lyrics}\n\
Caption to revise:\n\
{caption}\n\
Return only the revised caption.",
    },
    Template {
        id: OPTION_AUGMENTATION,
        text: "Add plausible but wrong answer options to the multiple-choice question below so that it cannot be \
solved by guessing or by text-only priors. Each new option must be clearly incorrect for the audio, \
similar in style and length to the existing options, and different from all of them.\n\
Question: {question}\n\
Existing options:\n\
{options}\n\
Correct answer: {answer}\n\
Return at least {count} new options, one per line, without labels.",
    },
    Template {
        id: COT_CAPTION,
        text: "Reason step by step about the attached music before describing it. \
Ground each step in what can be heard and in music theory: pulse and meter, tonal centre, \
chord functions, form, instrumentation, production. One claim per sentence.\n\
Measured attributes:\n\
{metadata}\n\
Final caption the reasoning should lead to:\n\
{target}\n\
Return only the reasoning.",
    },
    Template {
        id: COT_QA,
        text: "Reason step by step towards the answer of the listening question below. \
Ground each step in what can be heard and in music theory, one claim per sentence, \
and end with the step that selects the answer.\n\
Question:\n\
{prompt}\n\
Correct answer: {target}\n\
Measured attributes:\n\
{metadata}\n\
Return only the reasoning.",
    },
    Template {
        id: QUALITY_CHECK,
        text: "Listen to the attached segment and judge the annotation below. \
Answer Yes if it is accurate, specific and consistent with the audio, otherwise No. \
Reply with a single word.\n\
Annotation:\n\
{text}",
    },
    Template {
        id: DIFFICULTY,
        text: "Judge whether the following example is challenging: it should require careful listening or \
music-theory reasoning rather than surface cues. Reply Yes if it is challenging, otherwise No.\n\
Example ({option_count} options):\n\
{text}",
    },
    Template {
        id: STEP_VERIFY,
        text: "Listen to the attached segment and check one reasoning step. \
Reply Yes if the statement is true of the audio and musically correct, otherwise No. \
Reply with a single word.\n\
Context: {context}\n\
Step: {step}",
    },
    Template {
        id: STEP_REWRITE,
        text: "The reasoning step below was judged incorrect for the attached audio. \
Rewrite it as a single correct sentence that keeps the same role in the argument.\n\
Measured attributes:\n\
{metadata}\n\
Step: {step}",
    },
    Template {
        id: TRANSCRIBE,
        text: "Transcribe any sung or spoken lyrics in the attached segment. \
Return an empty reply if the segment is instrumental.",
    },
];

pub fn template(id: &str) -> Option<&'static Template> {
    TEMPLATES.iter().find(|t| t.id == id)
}

/// Placeholder names in order of first appearance.
pub fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if after[..close].chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && close > 0 => {
                let name = &after[..close];
                if !out.contains(&name) {
                    out.push(name);
                }
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

/// Substitute every `{name}` placeholder of a bundled template.
pub fn render_template(template_id: &str, variables: &BTreeMap<String, String>) -> Result<String, ProviderError> {
    let t = template(template_id).ok_or_else(|| ProviderError::Template(format!("unknown template {template_id:?}")))?;
    let missing: Vec<&str> = placeholders(t.text)
        .into_iter()
        .filter(|p| !variables.contains_key(*p))
        .collect();
    if !missing.is_empty() {
        return Err(ProviderError::Template(format!(
            "template {template_id:?} missing variables: {}",
            missing.join(", ")
        )));
    }
    let mut out = String::with_capacity(t.text.len());
    let mut rest = t.text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').and_then(|close| variables.get(&after[..close]).map(|v| (close, v))) {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn all_templates_have_unique_ids() {
        let mut ids: Vec<&str> = TEMPLATES.iter().map(|t| t.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), TEMPLATES.len());
    }

    #[test]
    fn caption_template_embeds_metadata_block() {
        let block = "{\"BPM\": 120, \"Key\": C major}";
        let text = render_template(DETAILED_CAPTION, &vars(&[("metadata", block), ("initial_caption", "bright pop")])).unwrap();
        assert!(text.contains(block));
        assert!(text.contains("bright pop"));
    }

    #[test]
    fn qa_template_names_skill() {
        let text = render_template(
            QA_GENERATION,
            &vars(&[("skill", "Temporal understanding"), ("metadata", "{}"), ("caption", "c")]),
        )
        .unwrap();
        assert!(text.contains("Target skill: Temporal understanding"));
    }

    #[test]
    fn errors() {
        assert!(matches!(render_template("nope", &BTreeMap::new()), Err(ProviderError::Template(_))));
        let err = render_template(QA_GENERATION, &vars(&[("skill", "x")])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("metadata") && msg.contains("caption"), "{msg}");
    }

    #[test]
    fn substituted_braces_are_not_reexpanded() {
        let text = render_template(QUALITY_CHECK, &vars(&[("text", "{text} and {other}")])).unwrap();
        assert!(text.ends_with("{text} and {other}"));
    }
}
