//! Prompt rendering. Lists in the inbound context are capped at the agent's
//! `max_context_items`: headline lists keep the newest items, symbol lists keep the
//! largest |zscore_5d|. The whole prompt must fit the token budget.

use serde_json::{Map, Value};

use super::{AgentError, AgentSpec};

pub const CHARS_PER_TOKEN: usize = 4;

/// Placeholders every template may use without a context key.
pub const BUILTIN_PLACEHOLDERS: [&str; 6] = ["inputs", "agent_id", "role_title", "goal", "crew", "schema"];

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(CHARS_PER_TOKEN)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
    /// Exactly what the agent is shown under `{inputs}`.
    pub view: Value,
}

impl RenderedPrompt {
    pub fn estimated_tokens(&self) -> usize {
        estimate_tokens(&self.system) + estimate_tokens(&self.user)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Key(String),
}

fn tokenize(template: &str) -> Result<Vec<Piece>, String> {
    let mut out = Vec::new();
    let mut text = String::new();
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                        _ => return Err(format!("unterminated or invalid placeholder after {{{name}")),
                    }
                }
                if name.is_empty() {
                    return Err("empty placeholder {}".into());
                }
                out.push(Piece::Text(std::mem::take(&mut text)));
                out.push(Piece::Key(name));
            }
            '}' => return Err("unmatched '}' in template (write '}}' for a literal brace)".into()),
            other => text.push(other),
        }
    }
    out.push(Piece::Text(text));
    Ok(out)
}

/// Placeholder names used by a template, in order of appearance.
pub fn placeholders(template: &str) -> Result<Vec<String>, String> {
    Ok(tokenize(template)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Key(k) => Some(k),
            Piece::Text(_) => None,
        })
        .collect())
}

fn zscore_of(item: &Value) -> Option<f64> {
    ["", "metrics", "metric_vector", "basis"].iter().find_map(|k| {
        let holder = if k.is_empty() { item } else { item.get(*k)? };
        holder.get("zscore_5d")?.as_f64()
    })
}

fn truncate_list(key: &str, items: &[Value], max: usize) -> Vec<Value> {
    let items: Vec<Value> = items.iter().map(|v| truncate_nested(v, max)).collect();
    if key.ends_with("headlines") {
        let mut items = items;
        // RFC 3339 UTC strings order chronologically
        items.sort_by(|a, b| {
            let ts = |v: &Value| v.get("published_at").and_then(Value::as_str).map(str::to_string);
            ts(b).cmp(&ts(a))
        });
        items.truncate(max);
        return items;
    }
    if items.len() <= max {
        return items;
    }
    if items.iter().all(|v| v.get("symbol").is_some()) {
        let mut ranked: Vec<(usize, f64)> = items
            .iter()
            .enumerate()
            .map(|(i, v)| (i, zscore_of(v).map(f64::abs).unwrap_or(-1.0)))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut keep: Vec<usize> = ranked.into_iter().take(max).map(|(i, _)| i).collect();
        keep.sort_unstable();
        return keep.into_iter().map(|i| items[i].clone()).collect();
    }
    items.into_iter().take(max).collect()
}

fn truncate_nested(v: &Value, max: usize) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .map(|(k, v)| {
                    let v = match v {
                        Value::Array(items) => Value::Array(truncate_list(k, items, max)),
                        other => truncate_nested(other, max),
                    };
                    (k.clone(), v)
                })
                .collect(),
        ),
        other => other.clone(),
    }
}

/// The inbound context as an agent with `max_items` sees it.
pub fn truncate_context(context: &Map<String, Value>, max_items: usize) -> Map<String, Value> {
    match truncate_nested(&Value::Object(context.clone()), max_items) {
        Value::Object(m) => m,
        _ => unreachable!("object stays an object"),
    }
}

pub fn system_prompt(agent: &AgentSpec) -> String {
    format!(
        "agent_id: {}\ncrew: {}\nrole: {}\ngoal: {}\nReply with exactly one fenced ```json block matching {} = {}",
        agent.agent_id,
        agent.crew,
        agent.role_title,
        agent.goal,
        agent.output_schema,
        agent.output_schema.describe()
    )
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Renders `agent`'s template against `inbound` (truncated) plus `prior_outputs`,
/// which is passed through untruncated so later agents see earlier results in full.
pub fn render_prompt(
    agent: &AgentSpec,
    inbound: &Map<String, Value>,
    prior_outputs: Option<&Value>,
    token_budget: usize,
) -> Result<RenderedPrompt, AgentError> {
    let mut view = truncate_context(inbound, agent.max_context_items);
    if let Some(p) = prior_outputs {
        view.insert("prior_outputs".into(), p.clone());
    }
    let view = Value::Object(view);
    let pieces = tokenize(&agent.prompt_template).map_err(AgentError::Template)?;
    let mut user = String::new();
    for piece in pieces {
        match piece {
            Piece::Text(t) => user.push_str(&t),
            Piece::Key(k) => match k.as_str() {
                "inputs" => {
                    user.push_str("```json\n");
                    user.push_str(&serde_json::to_string(&view).expect("serializable"));
                    user.push_str("\n```");
                }
                "agent_id" => user.push_str(&agent.agent_id),
                "role_title" => user.push_str(&agent.role_title),
                "goal" => user.push_str(&agent.goal),
                "crew" => user.push_str(agent.crew.name()),
                "schema" => user.push_str(agent.output_schema.describe()),
                _ => {
                    let v = view.get(&k).ok_or_else(|| AgentError::MissingContextKey(k.clone()))?;
                    user.push_str(&scalar_text(v));
                }
            },
        }
    }
    let rendered = RenderedPrompt {
        system: system_prompt(agent),
        user,
        view,
    };
    let estimated = rendered.estimated_tokens();
    if estimated > token_budget {
        return Err(AgentError::ContextBudgetExceeded {
            estimated,
            budget: token_budget,
        });
    }
    Ok(rendered)
}

/// Recovers `(agent_id, inputs)` from a rendered conversation; used by test servers
/// that answer chat requests with the scripted rules.
pub fn parse_rendered(system: &str, user: &str) -> Option<(String, Value)> {
    let agent_id = system.lines().find_map(|l| l.strip_prefix("agent_id: "))?.trim().to_string();
    Some((agent_id, super::schema::extract_block(user)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::schema::SchemaName;
    use crate::pipeline::types::Stage;
    use serde_json::json;

    fn agent(template: &str, max: usize) -> AgentSpec {
        AgentSpec {
            agent_id: "probe".into(),
            crew: Stage::Screening,
            role_title: "Probe".into(),
            goal: "test".into(),
            prompt_template: template.into(),
            output_schema: SchemaName::TickerScores,
            max_context_items: max,
        }
    }

    fn ctx(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn substitutes_scalars() {
        let r = render_prompt(&agent("Analyze {ticker}", 10), &ctx(json!({"ticker": "AAPL"})), None, 1000).unwrap();
        assert_eq!(r.user, "Analyze AAPL");
    }

    #[test]
    fn missing_key_is_reported() {
        let e = render_prompt(&agent("Analyze {ticker}", 10), &ctx(json!({})), None, 1000).unwrap_err();
        assert!(matches!(e, AgentError::MissingContextKey(k) if k == "ticker"));
    }

    #[test]
    fn literal_braces_and_bad_templates() {
        let r = render_prompt(&agent("{{\"a\": {x}}}", 10), &ctx(json!({"x": 1})), None, 1000).unwrap();
        assert_eq!(r.user, "{\"a\": 1}");
        assert!(placeholders("oops }").is_err());
        assert!(placeholders("{unterminated").is_err());
    }

    #[test]
    fn budget_is_enforced() {
        let big = "x".repeat(4000);
        let e = render_prompt(&agent("{blob}", 10), &ctx(json!({"blob": big})), None, 500).unwrap_err();
        assert!(matches!(e, AgentError::ContextBudgetExceeded { budget: 500, .. }));
    }

    #[test]
    fn symbol_lists_keep_extreme_zscores_in_original_order() {
        let items: Vec<Value> = [0.1, -3.0, 0.5, 2.0, -0.2]
            .iter()
            .enumerate()
            .map(|(i, z)| json!({"symbol": format!("S{i}"), "metrics": {"zscore_5d": z}}))
            .collect();
        let view = truncate_context(&ctx(json!({ "tickers": items })), 3);
        let kept: Vec<&str> = view["tickers"].as_array().unwrap().iter().map(|v| v["symbol"].as_str().unwrap()).collect();
        assert_eq!(kept, ["S1", "S2", "S3"]);
    }

    #[test]
    fn prior_outputs_are_not_truncated() {
        let prior = json!([{"agent_id": "a", "output": {"scores": (0..20).map(|i| json!({"symbol": i})).collect::<Vec<_>>()}}]);
        let r = render_prompt(&agent("{inputs}", 2), &ctx(json!({})), Some(&prior), 100_000).unwrap();
        assert_eq!(r.view["prior_outputs"], prior);
    }
}
