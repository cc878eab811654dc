//! Prompt templates for routers and the worker.
//!
//! Templates are plain-text files with `[system]` and `[user]` sections and
//! `{{placeholder}}` slots. They ship with the repo and their digests enter
//! the run's config digest, so a changed template reads as a changed
//! experiment. Rendering splices values in one pass; substituted text is never
//! rescanned, so briefs containing brace pairs cannot re-trigger expansion.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use super::{AggregatedBrief, ConditionKind, ConditionSpec, PipelineError};
use crate::corpus::{Label, Question};
use crate::detrng::{hash_str, DetRng};
use crate::modelio::{ChatMessage, Role};

pub const ROUTER_FORWARD_FILE: &str = "router_forward_full.txt";
pub const ROUTER_NOISY_FILE: &str = "router_noisy_rewrite.txt";
pub const WORKER_FILE: &str = "worker.txt";

const BUILTIN_FORWARD: &str = include_str!("../../../../prompts/router_forward_full.txt");
const BUILTIN_NOISY: &str = include_str!("../../../../prompts/router_noisy_rewrite.txt");
const BUILTIN_WORKER: &str = include_str!("../../../../prompts/worker.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    pub fn into_messages(self) -> Vec<ChatMessage> {
        vec![
            ChatMessage {
                role: Role::System,
                content: self.system,
            },
            ChatMessage {
                role: Role::User,
                content: self.user,
            },
        ]
    }
}

#[derive(Debug, Clone)]
struct SectionedTemplate {
    label: String,
    system: String,
    user: String,
}

fn template_err(label: &str, reason: impl Into<String>) -> PipelineError {
    PipelineError::Template {
        path: label.to_string(),
        reason: reason.into(),
    }
}

fn parse_sections(label: &str, text: &str) -> Result<SectionedTemplate, PipelineError> {
    static HEADER: OnceLock<regex::Regex> = OnceLock::new();
    let header = HEADER.get_or_init(|| regex::Regex::new(r"^\[([a-z_]+)\]$").expect("static regex"));
    let mut system: Option<String> = None;
    let mut user: Option<String> = None;
    let mut current: Option<&mut String> = None;
    for (lineno, line) in text.lines().enumerate() {
        if let Some(cap) = header.captures(line.trim()) {
            let slot = match &cap[1] {
                "system" => &mut system,
                "user" => &mut user,
                other => {
                    return Err(template_err(
                        label,
                        format!("line {}: unknown section [{other}]", lineno + 1),
                    ))
                }
            };
            if slot.is_some() {
                return Err(template_err(
                    label,
                    format!("line {}: duplicate section [{}]", lineno + 1, &cap[1]),
                ));
            }
            *slot = Some(String::new());
            current = slot.as_mut();
            continue;
        }
        match current.as_mut() {
            Some(buf) => {
                buf.push_str(line);
                buf.push('\n');
            }
            None if line.trim().is_empty() => {}
            None => {
                return Err(template_err(
                    label,
                    format!("line {}: text before the first section header", lineno + 1),
                ))
            }
        }
    }
    let finish = |s: Option<String>, name: &str| -> Result<String, PipelineError> {
        let s = s.ok_or_else(|| template_err(label, format!("missing [{name}] section")))?;
        let s = s.trim().to_string();
        if s.is_empty() {
            return Err(template_err(label, format!("[{name}] section is empty")));
        }
        Ok(s)
    };
    Ok(SectionedTemplate {
        label: label.to_string(),
        system: finish(system, "system")?,
        user: finish(user, "user")?,
    })
}

fn placeholder_re() -> &'static regex::Regex {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"\{\{([a-z_]+)\}\}").expect("static regex"))
}

fn render(label: &str, template: &str, vars: &BTreeMap<&str, &str>) -> Result<String, PipelineError> {
    let re = placeholder_re();
    let mut out = String::with_capacity(template.len());
    let mut last = 0usize;
    for cap in re.captures_iter(template) {
        let whole = cap.get(0).expect("match 0");
        let name = &cap[1];
        let value = vars.get(name).ok_or_else(|| {
            template_err(label, format!("unknown placeholder {{{{{name}}}}}"))
        })?;
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&template[last..]);
    Ok(out)
}

fn require_placeholders(t: &SectionedTemplate, required: &[&str]) -> Result<(), PipelineError> {
    for name in required {
        let marker = format!("{{{{{name}}}}}");
        if !t.user.contains(&marker) && !t.system.contains(&marker) {
            return Err(template_err(
                &t.label,
                format!("template must use the {marker} placeholder"),
            ));
        }
    }
    Ok(())
}

fn file_digest(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

/// Deterministic per-router variation tag. Routers in the same noisy trial
/// get different tags, so their rewrite instructions differ even at
/// temperature zero; everything is reproducible from the condition seed.
pub fn variation_tag(condition_seed: u64, question_id: &str, router_index: u32) -> String {
    let mut rng = DetRng::from_key(&[
        0x7661_7269_6174_6167, // "variatag" tag word for domain separation
        condition_seed,
        hash_str(question_id),
        router_index as u64,
    ]);
    format!("vt-{:016x}", rng.next_u64())
}

#[derive(Debug, Clone)]
pub struct PromptTemplates {
    forward: SectionedTemplate,
    noisy: SectionedTemplate,
    worker: SectionedTemplate,
    digests: BTreeMap<String, String>,
}

impl PromptTemplates {
    pub fn from_strings(
        forward: &str,
        noisy: &str,
        worker: &str,
    ) -> Result<PromptTemplates, PipelineError> {
        let forward_t = parse_sections(ROUTER_FORWARD_FILE, forward)?;
        let noisy_t = parse_sections(ROUTER_NOISY_FILE, noisy)?;
        let worker_t = parse_sections(WORKER_FILE, worker)?;
        require_placeholders(&forward_t, &["question_block"])?;
        require_placeholders(&noisy_t, &["question_block", "variation_tag"])?;
        require_placeholders(&worker_t, &["brief", "labels"])?;
        let digests = BTreeMap::from([
            (ROUTER_FORWARD_FILE.to_string(), file_digest(forward)),
            (ROUTER_NOISY_FILE.to_string(), file_digest(noisy)),
            (WORKER_FILE.to_string(), file_digest(worker)),
        ]);
        Ok(PromptTemplates {
            forward: forward_t,
            noisy: noisy_t,
            worker: worker_t,
            digests,
        })
    }

    pub fn load(dir: &Path) -> Result<PromptTemplates, PipelineError> {
        let read = |name: &str| -> Result<String, PipelineError> {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| PipelineError::Io {
                path: path.display().to_string(),
                source: e,
            })
        };
        PromptTemplates::from_strings(
            &read(ROUTER_FORWARD_FILE)?,
            &read(ROUTER_NOISY_FILE)?,
            &read(WORKER_FILE)?,
        )
    }

    /// The templates shipped with this repo, compiled in.
    pub fn builtin() -> PromptTemplates {
        PromptTemplates::from_strings(BUILTIN_FORWARD, BUILTIN_NOISY, BUILTIN_WORKER)
            .expect("builtin templates are valid")
    }

    /// sha256 per template file, keyed by file name. Folded into the config
    /// digest so prompt edits invalidate resume.
    pub fn file_digests(&self) -> &BTreeMap<String, String> {
        &self.digests
    }

    /// Canonical text block for a question: stem, then one line per option.
    pub fn question_block(q: &Question) -> String {
        let mut s = String::new();
        s.push_str(&q.stem);
        s.push_str("\n\nOptions:\n");
        for (i, opt) in q.options.iter().enumerate() {
            let label = Label::from_index(i).expect("validated option count");
            s.push_str(&format!("{label}. {opt}\n"));
        }
        s
    }

    pub fn router_prompt(
        &self,
        q: &Question,
        condition: ConditionSpec,
        router_index: u32,
    ) -> Result<RenderedPrompt, PipelineError> {
        condition.validate()?;
        if router_index == 0 || router_index > condition.router_count {
            return Err(PipelineError::InvalidCondition(
                condition.key(),
                format!("router index {router_index} out of range"),
            ));
        }
        let block = Self::question_block(q);
        let tag = variation_tag(condition.condition_seed, &q.id, router_index);
        let template = match condition.kind {
            ConditionKind::ForwardFull => &self.forward,
            ConditionKind::NoisyRewrite => &self.noisy,
        };
        let vars = BTreeMap::from([
            ("question_block", block.as_str()),
            ("variation_tag", tag.as_str()),
        ]);
        Ok(RenderedPrompt {
            system: render(&template.label, &template.system, &vars)?,
            user: render(&template.label, &template.user, &vars)?,
        })
    }

    /// The worker prompt is built from the aggregated brief and the label
    /// alphabet only; the original question never enters here.
    pub fn worker_prompt(
        &self,
        brief: &AggregatedBrief,
        labels: &[Label],
    ) -> Result<RenderedPrompt, PipelineError> {
        let label_list = labels
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        let vars = BTreeMap::from([
            ("brief", brief.text.as_str()),
            ("labels", label_list.as_str()),
        ]);
        Ok(RenderedPrompt {
            system: render(&self.worker.label, &self.worker.system, &vars)?,
            user: render(&self.worker.label, &self.worker.user, &vars)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::aggregate;
    use crate::pipeline::RouterOutput;

    fn question() -> Question {
        Question {
            id: "q042".into(),
            stem: "Which gas dominates Earth's atmosphere?".into(),
            options: vec![
                "Oxygen".into(),
                "Nitrogen".into(),
                "Argon".into(),
                "Carbon dioxide".into(),
            ],
            answer_key: Label::parse("B").unwrap(),
            meta: Default::default(),
        }
    }

    #[test]
    fn builtin_templates_parse_and_render() {
        let t = PromptTemplates::builtin();
        let q = question();
        let p = t.router_prompt(&q, ConditionSpec::clean(7), 1).unwrap();
        assert!(p.user.contains("Which gas dominates Earth's atmosphere?"));
        for opt in &q.options {
            assert!(p.user.contains(opt.as_str()), "missing option {opt}");
        }
        assert!(p.user.contains("A. Oxygen"));
        assert!(p.user.contains("D. Carbon dioxide"));
        assert!(!p.user.contains("{{"));
    }

    #[test]
    fn noisy_prompt_carries_index_specific_tag() {
        let t = PromptTemplates::builtin();
        let q = question();
        let cond = ConditionSpec::noisy(5, 11);
        let p3 = t.router_prompt(&q, cond, 3).unwrap();
        let p4 = t.router_prompt(&q, cond, 4).unwrap();
        let tag3 = variation_tag(11, "q042", 3);
        assert!(p3.user.contains(&tag3));
        assert!(!p4.user.contains(&tag3));
        assert!(p3.user.contains("Delete part of the useful information"));
        // deterministic: same inputs render the same prompt
        assert_eq!(p3, t.router_prompt(&q, cond, 3).unwrap());
    }

    #[test]
    fn variation_tags_differ_across_all_key_parts() {
        let base = variation_tag(1, "q1", 1);
        assert_ne!(base, variation_tag(2, "q1", 1));
        assert_ne!(base, variation_tag(1, "q2", 1));
        assert_ne!(base, variation_tag(1, "q1", 2));
        assert_eq!(base, variation_tag(1, "q1", 1));
        assert!(base.starts_with("vt-"));
    }

    #[test]
    fn worker_prompt_names_exact_alphabet_and_embeds_brief() {
        let t = PromptTemplates::builtin();
        let outs = [RouterOutput {
            router_index: 1,
            brief: "Something about gases. Pick the common one.".into(),
            latency_ms: 0,
            usage: None,
            from_cache: false,
        }];
        let agg = aggregate(&outs).unwrap();
        let labels: Vec<Label> = (0..4).map(|i| Label::from_index(i).unwrap()).collect();
        let p = t.worker_prompt(&agg, &labels).unwrap();
        assert!(p.user.contains("A, B, C, D"));
        assert!(p.user.contains(&agg.text));
        assert!(p.user.contains("--- Report 1 ---"));
    }

    #[test]
    fn brace_pairs_in_briefs_do_not_expand() {
        let t = PromptTemplates::builtin();
        let outs = [RouterOutput {
            router_index: 1,
            brief: "weird {{labels}} literal".into(),
            latency_ms: 0,
            usage: None,
            from_cache: false,
        }];
        let agg = aggregate(&outs).unwrap();
        let labels = vec![Label::parse("A").unwrap(), Label::parse("B").unwrap()];
        let p = t.worker_prompt(&agg, &labels).unwrap();
        assert!(p.user.contains("weird {{labels}} literal"));
    }

    #[test]
    fn section_parsing_rejects_malformed_files() {
        assert!(parse_sections("t", "no sections at all").is_err());
        assert!(parse_sections("t", "[system]\nhello").is_err()); // missing [user]
        assert!(parse_sections("t", "[system]\nx\n[bogus]\ny").is_err());
        assert!(parse_sections("t", "[system]\nx\n[system]\ny\n[user]\nz").is_err());
        assert!(parse_sections("t", "[system]\n\n[user]\nz").is_err()); // empty system
        let ok = parse_sections("t", "\n[system]\n s \n[user]\n u \n").unwrap();
        assert_eq!(ok.system, "s");
        assert_eq!(ok.user, "u");
    }

    #[test]
    fn unknown_placeholder_is_rejected_at_load() {
        let bad_worker = "[system]\nS\n[user]\n{{brief}} {{labels}} {{mystery}}";
        let err = PromptTemplates::from_strings(
            BUILTIN_FORWARD,
            BUILTIN_NOISY,
            bad_worker,
        );
        // load succeeds structurally; rendering must fail on the unknown slot
        let t = err.unwrap();
        let agg = AggregatedBrief {
            text: "b".into(),
            router_count: 1,
        };
        let labels = vec![Label::parse("A").unwrap(), Label::parse("B").unwrap()];
        assert!(matches!(
            t.worker_prompt(&agg, &labels).unwrap_err(),
            PipelineError::Template { reason, .. } if reason.contains("mystery")
        ));
    }

    #[test]
    fn missing_required_placeholder_is_rejected() {
        let bad = "[system]\nS\n[user]\nno slots here";
        assert!(PromptTemplates::from_strings(bad, BUILTIN_NOISY, BUILTIN_WORKER).is_err());
        assert!(PromptTemplates::from_strings(BUILTIN_FORWARD, bad, BUILTIN_WORKER).is_err());
        assert!(PromptTemplates::from_strings(BUILTIN_FORWARD, BUILTIN_NOISY, bad).is_err());
    }

    #[test]
    fn load_from_dir_matches_builtin_digests() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(ROUTER_FORWARD_FILE), BUILTIN_FORWARD).unwrap();
        std::fs::write(dir.path().join(ROUTER_NOISY_FILE), BUILTIN_NOISY).unwrap();
        std::fs::write(dir.path().join(WORKER_FILE), BUILTIN_WORKER).unwrap();
        let loaded = PromptTemplates::load(dir.path()).unwrap();
        assert_eq!(loaded.file_digests(), PromptTemplates::builtin().file_digests());
        assert_eq!(loaded.file_digests().len(), 3);
    }

    #[test]
    fn router_index_bounds_checked() {
        let t = PromptTemplates::builtin();
        let q = question();
        assert!(t.router_prompt(&q, ConditionSpec::noisy(3, 0), 4).is_err());
        assert!(t.router_prompt(&q, ConditionSpec::noisy(3, 0), 0).is_err());
    }
}
