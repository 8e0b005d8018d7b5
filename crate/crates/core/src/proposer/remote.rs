use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::prompts;
use super::{
    AuditEvent, GraphTranslation, Priority, PromptContext, Proposal, Proposer, ProposerConfig, ProposerError,
    RankedHypothesis, RegionSpec, SearchRegion, TaskView, MIN_ALTERNATES,
};
use crate::ensemble::{HypothesisRecord, Origin};
use crate::exprlang::ParsedHypothesis;
use crate::grn::{Edge, Intervention, Node, NodeAction};

/// Finds the first complete JSON object in `text`, skipping any prose or
/// code fences around it.
pub fn extract_json_object(text: &str) -> Result<serde_json::Map<String, Value>, String> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(m))) = stream.next() {
            return Ok(m);
        }
    }
    Err("no JSON object found in completion".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Small,
    Large,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Small => "small",
            Role::Large => "large",
        }
    }
}

type Validator<'a, T> = &'a dyn Fn(&serde_json::Map<String, Value>) -> Result<T, ProposerError>;

/// Chat-completion client. Every request and raw completion is kept in an
/// audit buffer; the API key is read once from the configured environment
/// variable and never recorded.
pub struct RemoteProposer {
    cfg: ProposerConfig,
    agent: ureq::Agent,
    url: String,
    api_key: String,
    audit: Vec<AuditEvent>,
}

impl std::fmt::Debug for RemoteProposer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProposer").field("url", &self.url).finish_non_exhaustive()
    }
}

impl RemoteProposer {
    pub fn new(cfg: ProposerConfig) -> Result<RemoteProposer, ProposerError> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env)
            .map_err(|_| ProposerError::Config(format!("environment variable {} is not set", cfg.api_key_env)))?;
        let endpoint = cfg.endpoint.clone().unwrap_or_default();
        let url = format!("{}/v1/chat/completions", endpoint.trim_end_matches('/'));
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build();
        Ok(RemoteProposer {
            cfg,
            agent,
            url,
            api_key,
            audit: Vec::new(),
        })
    }

    /// Opens and closes a TCP connection to the endpoint host, so an
    /// unreachable server is reported before any task starts.
    pub fn check_endpoint(&self) -> Result<(), ProposerError> {
        let req = self.agent.post(&self.url);
        let url = req
            .request_url()
            .map_err(|e| ProposerError::Config(format!("bad endpoint {}: {e}", self.url)))?;
        let port = url.port().unwrap_or(if url.scheme() == "https" { 443 } else { 80 });
        let addr = format!("{}:{}", url.host(), port);
        let addrs = std::net::ToSocketAddrs::to_socket_addrs(&addr)
            .map_err(|e| ProposerError::Transport(format!("cannot resolve {addr}: {e}")))?;
        for a in addrs {
            if std::net::TcpStream::connect_timeout(&a, Duration::from_secs(5)).is_ok() {
                return Ok(());
            }
        }
        Err(ProposerError::Transport(format!("endpoint {addr} is unreachable")))
    }

    fn post(&self, role: Role, messages: &[Value]) -> Result<String, ProposerError> {
        let (model, temperature) = match role {
            Role::Small => (&self.cfg.model_small, self.cfg.temperature_small),
            Role::Large => (&self.cfg.model_large, self.cfg.temperature_large),
        };
        let body = json!({
            "model": model,
            "temperature": temperature,
            "messages": messages,
            "response_format": {"type": "json_object"},
        });
        let resp = self
            .agent
            .post(&self.url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| match e {
                ureq::Error::Status(code, _) => ProposerError::Transport(format!("HTTP status {code}")),
                ureq::Error::Transport(t) => ProposerError::Transport(t.kind().to_string()),
            })?;
        let v: Value = resp
            .into_json()
            .map_err(|e| ProposerError::Transport(format!("unreadable response body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProposerError::Transport("response has no choices[0].message.content".into()))
    }

    /// One logical request: on a validation failure the model gets a single
    /// repair turn; further failures start a fresh conversation after an
    /// exponential backoff. With `retry_after_repair` false a failed repair
    /// ends the call with the validation error.
    fn call<T>(
        &self,
        role: Role,
        prompt: String,
        validate: Validator<'_, T>,
        retry_after_repair: bool,
    ) -> (Result<T, ProposerError>, Vec<AuditEvent>) {
        let mut events = Vec::new();
        let user = |text: &str| json!({"role": "user", "content": text});
        let mut messages = vec![user(&prompt)];
        let mut repaired = false;
        let mut retries = 0u32;
        let mut last_error = String::new();
        for attempt in 1..=self.cfg.max_attempts {
            let sent = messages.last().and_then(|m| m["content"].as_str()).unwrap_or_default().to_string();
            events.push(AuditEvent::Prompt {
                role: role.name().into(),
                attempt,
                text: sent,
            });
            let mut completion = None;
            let outcome = match self.post(role, &messages) {
                Err(e) => Err(e),
                Ok(text) => {
                    events.push(AuditEvent::Completion {
                        role: role.name().into(),
                        attempt,
                        text: text.clone(),
                    });
                    let r = extract_json_object(&text)
                        .map_err(ProposerError::SchemaViolation)
                        .and_then(|o| validate(&o));
                    completion = Some(text);
                    r
                }
            };
            let err = match outcome {
                Ok(v) => return (Ok(v), events),
                Err(e) => e,
            };
            last_error = err.to_string();
            let schema = matches!(err, ProposerError::SchemaViolation(_) | ProposerError::PathRuleViolation { .. });
            if schema && repaired && !retry_after_repair {
                return (Err(err), events);
            }
            if attempt == self.cfg.max_attempts {
                break;
            }
            retries += 1;
            events.push(AuditEvent::Retry {
                role: role.name().into(),
                attempt,
                error: last_error.clone(),
            });
            if schema && !repaired {
                repaired = true;
                messages.push(json!({"role": "assistant", "content": completion.unwrap_or_default()}));
                messages.push(user(&prompts::repair(&last_error)));
            } else {
                messages = vec![user(&prompt)];
                if self.cfg.backoff_ms > 0 {
                    std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (retries - 1).min(10)));
                }
            }
        }
        (
            Err(ProposerError::ProposerFailure {
                attempts: self.cfg.max_attempts,
                last_error,
            }),
            events,
        )
    }

    /// Turns a hypothesis text into an equation record, asking the model for
    /// an executable form when the text does not parse as given.
    fn equation_record(
        &self,
        ctx: &PromptContext,
        text: &str,
        origin: Origin,
        events: &mut Vec<AuditEvent>,
    ) -> Result<HypothesisRecord, ProposerError> {
        let names: Vec<String> = ctx.variables().iter().map(|v| v.name.clone()).collect();
        let usable = |h: &ParsedHypothesis| h.bind_check(&names).is_ok();
        if let Ok(h) = ParsedHypothesis::parse(text) {
            if usable(&h) {
                return Ok(HypothesisRecord::equation(text, origin));
            }
        }
        let validate = |o: &serde_json::Map<String, Value>| -> Result<String, ProposerError> {
            let e = str_field(o, "expression")?;
            let h = ParsedHypothesis::parse(&e).map_err(|err| ProposerError::SchemaViolation(err.to_string()))?;
            h.bind_check(&names).map_err(|err| ProposerError::SchemaViolation(err.to_string()))?;
            Ok(e)
        };
        let (r, ev) = self.call(Role::Small, prompts::executable_structure(ctx, text, &[]), &validate, true);
        events.extend(ev);
        match r {
            Ok(e) => Ok(HypothesisRecord::equation(&e, origin)),
            Err(ProposerError::ProposerFailure { last_error, .. }) if !last_error.starts_with("transport") => {
                Ok(HypothesisRecord::invalid(text, origin, last_error))
            }
            Err(e) => Err(e),
        }
    }

    fn graph_record(&self, id: &str, text: &str, origin: Origin, events: &mut Vec<AuditEvent>) -> Result<HypothesisRecord, ProposerError> {
        let (r, ev) = self.translate(id, text);
        events.extend(ev);
        match r {
            Ok(t) => {
                let g = t.graph()?;
                Ok(HypothesisRecord::graph(text, g, origin))
            }
            Err(e @ (ProposerError::PathRuleViolation { .. } | ProposerError::SchemaViolation(_))) => {
                Ok(HypothesisRecord::invalid(text, origin, e.to_string()))
            }
            Err(e) => Err(e),
        }
    }

    fn translate(&self, id: &str, text: &str) -> (Result<GraphTranslation, ProposerError>, Vec<AuditEvent>) {
        let validate = |o: &serde_json::Map<String, Value>| -> Result<GraphTranslation, ProposerError> {
            let t = o
                .get("translation")
                .and_then(Value::as_object)
                .ok_or_else(|| ProposerError::SchemaViolation("missing translation object".into()))?;
            let edges = t
                .get("edges")
                .and_then(Value::as_array)
                .ok_or_else(|| ProposerError::SchemaViolation("missing translation.edges".into()))?
                .iter()
                .map(parse_edge)
                .collect::<Result<Vec<Edge>, _>>()?;
            let tr = GraphTranslation {
                hypothesis_id: t.get("hypothesis_id").and_then(Value::as_str).unwrap_or(id).to_string(),
                rationale: t.get("rationale").and_then(Value::as_str).unwrap_or_default().to_string(),
                edges,
            };
            tr.graph()?;
            Ok(tr)
        };
        self.call(Role::Large, prompts::graph_translation(id, text), &validate, false)
    }

    fn sample_one(&self, ctx: &PromptContext) -> (Result<HypothesisRecord, ProposerError>, Vec<AuditEvent>) {
        let mut events = Vec::new();
        let r = match &ctx.task {
            TaskView::Equation { .. } => {
                let (r, ev) = self.call(Role::Small, prompts::equation_sample(ctx), &|o| str_field(o, "primary_hypothesis"), true);
                events.extend(ev);
                r.and_then(|text| self.equation_record(ctx, &text, Origin::SmallModel, &mut events))
            }
            TaskView::Graph => {
                let (r, ev) = self.call(Role::Small, prompts::graph_sample(ctx), &|o| str_field(o, "hypothesis"), true);
                events.extend(ev);
                r.and_then(|text| self.graph_record("h1", &text, Origin::SmallModel, &mut events))
            }
        };
        (r, events)
    }

    fn synthesize_equation(&self, ctx: &PromptContext, events: &mut Vec<AuditEvent>) -> Result<Proposal, ProposerError> {
        let validate = |o: &serde_json::Map<String, Value>| -> Result<(String, Vec<String>, String), ProposerError> {
            let primary = str_field(o, "primary_hypothesis")?;
            let alternates = match o.get("alternates") {
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|v| {
                        v.as_str()
                            .map(str::to_string)
                            .ok_or_else(|| ProposerError::SchemaViolation("alternates must be strings".into()))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                None => Vec::new(),
                _ => return Err(ProposerError::SchemaViolation("alternates must be a list".into())),
            };
            let reasoning = o.get("reasoning").and_then(Value::as_str).unwrap_or_default().to_string();
            Ok((primary, alternates, reasoning))
        };
        let (r, ev) = self.call(Role::Large, prompts::equation_generation(ctx), &validate, true);
        events.extend(ev);
        let (primary_text, alt_texts, reasoning) = r?;
        let variables = ctx.variables().to_vec();
        let (r, ev) = self.call(
            Role::Large,
            prompts::equation_regions(ctx, &primary_text, &alt_texts),
            &|o| parse_regions(o, |r| parse_bounds(r, &variables)),
            true,
        );
        events.extend(ev);
        let (search_regions, confidence, done) = r?;
        let primary = self.equation_record(ctx, &primary_text, Origin::LargeModel, events)?;
        let alternates = alt_texts
            .iter()
            .map(|t| self.equation_record(ctx, t, Origin::LargeModel, events))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(finish(primary, alternates, search_regions, confidence, done, reasoning))
    }

    fn synthesize_graph(&self, ctx: &PromptContext, events: &mut Vec<AuditEvent>) -> Result<Proposal, ProposerError> {
        let validate = |o: &serde_json::Map<String, Value>| {
            let hyps = o
                .get("hypotheses")
                .and_then(Value::as_array)
                .ok_or_else(|| ProposerError::SchemaViolation("missing hypotheses list".into()))?
                .iter()
                .map(|h| Ok((str_field_v(h, "id")?, str_field_v(h, "text")?)))
                .collect::<Result<Vec<(String, String)>, ProposerError>>()?;
            if hyps.is_empty() {
                return Err(ProposerError::SchemaViolation("empty hypotheses list".into()));
            }
            let primary_id = str_field(o, "primary_hypothesis_id")?;
            if !hyps.iter().any(|(id, _)| *id == primary_id) {
                return Err(ProposerError::SchemaViolation(format!(
                    "primary_hypothesis_id {primary_id} does not name a hypothesis"
                )));
            }
            let regions = parse_regions(o, parse_interventions)?;
            Ok((hyps, primary_id, regions))
        };
        let (r, ev) = self.call(Role::Large, prompts::graph_generation(ctx), &validate, true);
        events.extend(ev);
        let (hyps, primary_id, (search_regions, confidence, done)) = r?;
        let mut primary = None;
        let mut alternates = Vec::new();
        for (id, text) in &hyps {
            let rec = self.graph_record(id, text, Origin::LargeModel, events)?;
            if *id == primary_id && primary.is_none() {
                primary = Some(rec);
            } else {
                alternates.push(rec);
            }
        }
        let primary = primary.expect("validated primary id");
        Ok(finish(primary, alternates, search_regions, confidence, done, String::new()))
    }

    fn record(&mut self, events: Vec<AuditEvent>) {
        self.audit.extend(events);
    }

    /// Asks whether some constant values make `hypothesis` equal to `truth`.
    pub fn judge(&mut self, truth: &str, hypothesis: &str) -> Result<bool, ProposerError> {
        let validate = |o: &serde_json::Map<String, Value>| {
            let a = str_field(o, "answer")?;
            match a.trim().to_ascii_lowercase().as_str() {
                "yes" => Ok(true),
                "no" => Ok(false),
                other => Err(ProposerError::SchemaViolation(format!("answer must be Yes or No, got {other}"))),
            }
        };
        let (r, ev) = self.call(Role::Large, prompts::judge(truth, hypothesis), &validate, true);
        self.record(ev);
        r
    }
}

fn finish(
    primary: HypothesisRecord,
    alternates: Vec<HypothesisRecord>,
    search_regions: Vec<SearchRegion>,
    confidence: f64,
    done: bool,
    reasoning: String,
) -> Proposal {
    let mut p = Proposal {
        primary,
        alternates,
        search_regions,
        confidence,
        done,
        reasoning,
        warnings: Vec::new(),
    };
    if p.alternates.len() < MIN_ALTERNATES {
        p.warnings.push(format!("only {} alternates proposed", p.alternates.len()));
    }
    p.enforce_alternate_cap();
    p
}

fn str_field(o: &serde_json::Map<String, Value>, key: &str) -> Result<String, ProposerError> {
    match o.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        _ => Err(ProposerError::SchemaViolation(format!("missing non-empty string field `{key}`"))),
    }
}

fn str_field_v(v: &Value, key: &str) -> Result<String, ProposerError> {
    match v.as_object() {
        Some(o) => str_field(o, key),
        None => Err(ProposerError::SchemaViolation("expected an object".into())),
    }
}

fn parse_edge(v: &Value) -> Result<Edge, ProposerError> {
    let bad = |m: String| ProposerError::SchemaViolation(m);
    let node = |k: &str| -> Result<Node, ProposerError> { str_field_v(v, k)?.parse::<Node>().map_err(bad) };
    let sign = match v.get("sign") {
        Some(s) if s.as_i64() == Some(1) || s.as_str() == Some("+") => 1,
        Some(s) if s.as_i64() == Some(-1) || s.as_str() == Some("-") => -1,
        other => return Err(bad(format!("edge sign must be 1 or -1, got {other:?}"))),
    };
    let e = Edge::new(node("src")?, node("dst")?, sign);
    if !e.is_admissible() {
        return Err(bad(format!("inadmissible edge {e}")));
    }
    Ok(e)
}

fn parse_bounds(r: &serde_json::Map<String, Value>, variables: &[crate::oracle::VariableSpec]) -> Result<RegionSpec, ProposerError> {
    let b = r
        .get("bounds")
        .and_then(Value::as_object)
        .ok_or_else(|| ProposerError::SchemaViolation("region without bounds object".into()))?;
    let mut out = BTreeMap::new();
    for (name, iv) in b {
        let pair = iv
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?)))
            .ok_or_else(|| ProposerError::SchemaViolation(format!("bounds for {name} must be [lo, hi]")))?;
        out.insert(name.clone(), pair);
    }
    if !out.keys().any(|k| variables.iter().any(|v| &v.name == k)) && !out.is_empty() {
        return Err(ProposerError::SchemaViolation("region bounds name no known parameter".into()));
    }
    Ok(RegionSpec::Bounds(out))
}

fn parse_interventions(r: &serde_json::Map<String, Value>) -> Result<RegionSpec, ProposerError> {
    let list = r
        .get("interventions")
        .and_then(Value::as_array)
        .ok_or_else(|| ProposerError::SchemaViolation("region without interventions list".into()))?;
    let mut out = Vec::new();
    for iv in list {
        let actions: Vec<NodeAction> = serde_json::from_value(iv.clone())
            .map_err(|e| ProposerError::SchemaViolation(format!("malformed intervention: {e}")))?;
        out.push(Intervention { actions }.canonical());
    }
    Ok(RegionSpec::Interventions(out))
}

type RegionParse = (Vec<SearchRegion>, f64, bool);

fn parse_regions(
    o: &serde_json::Map<String, Value>,
    spec: impl Fn(&serde_json::Map<String, Value>) -> Result<RegionSpec, ProposerError>,
) -> Result<RegionParse, ProposerError> {
    let list = o
        .get("search_regions")
        .and_then(Value::as_array)
        .ok_or_else(|| ProposerError::SchemaViolation("search_regions must be a list".into()))?;
    let mut regions = Vec::new();
    for r in list {
        let r = r
            .as_object()
            .ok_or_else(|| ProposerError::SchemaViolation("search region must be an object".into()))?;
        let priority = match r.get("priority").and_then(Value::as_str) {
            Some("high") => Priority::High,
            Some("low") => Priority::Low,
            _ => Priority::Medium,
        };
        regions.push(SearchRegion {
            spec: spec(r)?,
            n_experiments: r.get("n_experiments").and_then(Value::as_u64).unwrap_or(1).max(1) as usize,
            priority,
            rationale: r.get("rationale").and_then(Value::as_str).unwrap_or_default().to_string(),
        });
    }
    let confidence = o.get("confidence").and_then(Value::as_f64).unwrap_or(0.0).clamp(0.0, 1.0);
    let done = o.get("done").and_then(Value::as_bool).unwrap_or(false);
    Ok((regions, confidence, done))
}

impl Proposer for RemoteProposer {
    fn sample_origin(&self) -> Origin {
        Origin::SmallModel
    }

    fn sample_hypothesis(&mut self, ctx: &PromptContext) -> Result<HypothesisRecord, ProposerError> {
        let (r, ev) = self.sample_one(ctx);
        self.record(ev);
        r
    }

    /// Issues up to `max_in_flight` requests at a time; results and audit
    /// events keep request order.
    fn sample_batch(&mut self, ctx: &PromptContext, n: usize) -> Result<Vec<HypothesisRecord>, ProposerError> {
        let mut results = Vec::with_capacity(n);
        let mut remaining = n;
        while remaining > 0 {
            let k = remaining.min(self.cfg.max_in_flight);
            let this = &*self;
            let chunk: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..k).map(|_| s.spawn(|| this.sample_one(ctx))).collect();
                handles.into_iter().map(|h| h.join().expect("sampling thread panicked")).collect()
            });
            results.extend(chunk);
            remaining -= k;
        }
        let mut out = Vec::with_capacity(n);
        let mut first_err = None;
        for (r, ev) in results {
            self.record(ev);
            match r {
                Ok(rec) => out.push(rec),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    fn synthesize_proposal(&mut self, ctx: &PromptContext) -> Result<Proposal, ProposerError> {
        let mut events = Vec::new();
        let r = if ctx.is_graph() {
            self.synthesize_graph(ctx, &mut events)
        } else {
            self.synthesize_equation(ctx, &mut events)
        };
        self.record(events);
        r
    }

    fn translate_graph(&mut self, id: &str, text: &str) -> Result<GraphTranslation, ProposerError> {
        let (r, ev) = self.translate(id, text);
        self.record(ev);
        r
    }

    fn arbitrate(&mut self, ctx: &PromptContext, candidates: &[RankedHypothesis]) -> Result<Option<String>, ProposerError> {
        let (r, ev) = self.call(Role::Large, prompts::arbiter(ctx, candidates), &|o| str_field(o, "choice"), true);
        self.record(ev);
        r.map(Some)
    }

    fn drain_audit(&mut self) -> Vec<AuditEvent> {
        std::mem::take(&mut self.audit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_object_from_fenced_prose() {
        let m = extract_json_object("Sure!\n```json\n{\"a\": [1, {\"b\": 2}]}\n```").unwrap();
        assert_eq!(m["a"][1]["b"], 2);
        assert!(extract_json_object("no braces here").is_err());
        assert!(extract_json_object("{broken").is_err());
        let m = extract_json_object("{oops} then {\"ok\": true}").unwrap();
        assert_eq!(m["ok"], true);
    }

    #[test]
    fn parses_signed_edges() {
        let e = parse_edge(&json!({"src": "signal", "dst": "A", "sign": 1})).unwrap();
        assert_eq!(e, Edge::new(Node::Signal, Node::A, 1));
        assert!(parse_edge(&json!({"src": "A", "dst": "signal", "sign": 1})).is_err());
        assert!(parse_edge(&json!({"src": "A", "dst": "B", "sign": 0})).is_err());
    }

    #[test]
    fn parses_intervention_regions() {
        let o = json!({"search_regions": [{"interventions": [[{"node": "A", "action": "knock_down", "factor": 0.1}], []],
            "n_experiments": 2, "priority": "high", "rationale": "r"}], "confidence": 0.4, "done": false});
        let (r, c, d) = parse_regions(o.as_object().unwrap(), parse_interventions).unwrap();
        assert_eq!(c, 0.4);
        assert!(!d);
        let RegionSpec::Interventions(iv) = &r[0].spec else { unreachable!() };
        assert_eq!(iv.len(), 2);
        assert_eq!(iv[0].describe(), "knock_down(A, 0.1)");
    }
}
