//! Network file reader and writer.
//!
//! ```text
//! # comment
//! [buses]
//! id=1,name=source,phases=123,substation=true
//! [lines]
//! id=1,from=1,to=2,r_pu=0.01,x_pu=0.02
//! [switches]
//! line=1,kind=sectionalizing,default=closed
//! [loads]
//! bus=2,p_kw=40,phases=123,sheddable=true
//! [ders]
//! bus=2,kw=250,mode=grid_forming
//! ```
//!
//! `default` on switches is optional and falls back to the kind's default
//! (tie open, sectionalizing closed).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{
    Bus, Der, DerMode, GridError, Line, Load, NetworkGraph, Phases, Switch, SwitchKind, SwitchState,
};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Buses,
    Lines,
    Switches,
    Loads,
    Ders,
}

struct Record<'a> {
    lineno: usize,
    fields: HashMap<&'a str, &'a str>,
}

impl<'a> Record<'a> {
    fn parse(lineno: usize, text: &'a str, allowed: &[&str]) -> Result<Self, GridError> {
        let mut fields = HashMap::new();
        for part in text.split(',') {
            let part = part.trim();
            let (k, v) = part.split_once('=').ok_or_else(|| GridError::Parse {
                line: lineno,
                msg: format!("expected key=value, got `{part}`"),
            })?;
            let k = k.trim();
            if !allowed.contains(&k) {
                return Err(GridError::Parse {
                    line: lineno,
                    msg: format!("unknown field `{k}`"),
                });
            }
            if fields.insert(k, v.trim()).is_some() {
                return Err(GridError::Parse {
                    line: lineno,
                    msg: format!("field `{k}` given twice"),
                });
            }
        }
        Ok(Self { lineno, fields })
    }

    fn raw(&self, key: &str) -> Result<&'a str, GridError> {
        self.fields
            .get(key)
            .copied()
            .ok_or_else(|| GridError::Parse {
                line: self.lineno,
                msg: format!("missing field `{key}`"),
            })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, GridError> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| GridError::Parse {
            line: self.lineno,
            msg: format!("bad value `{raw}` for `{key}`"),
        })
    }

    fn opt(&self, key: &str) -> Option<&'a str> {
        self.fields.get(key).copied()
    }

    fn err(&self, msg: impl Into<String>) -> GridError {
        GridError::Parse {
            line: self.lineno,
            msg: msg.into(),
        }
    }

    fn phases(&self, key: &str) -> Result<Phases, GridError> {
        let raw = self.raw(key)?;
        let digits: Option<Vec<u8>> = raw
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as u8))
            .collect();
        digits
            .and_then(|d| Phases::from_list(&d))
            .ok_or_else(|| self.err(format!("bad phase list `{raw}`")))
    }

    fn flag(&self, key: &str) -> Result<bool, GridError> {
        match self.raw(key)? {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(self.err(format!("bad boolean `{other}` for `{key}`"))),
        }
    }
}

/// Parses network-file contents into a validated [`NetworkGraph`].
pub fn load_network(text: &str) -> Result<NetworkGraph, GridError> {
    let mut section = None;
    let mut buses = Vec::new();
    let mut lines = Vec::new();
    let mut switches = Vec::new();
    let mut loads = Vec::new();
    let mut ders = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            section = Some(match content {
                "[buses]" => Section::Buses,
                "[lines]" => Section::Lines,
                "[switches]" => Section::Switches,
                "[loads]" => Section::Loads,
                "[ders]" => Section::Ders,
                other => {
                    return Err(GridError::Parse {
                        line: lineno,
                        msg: format!("unknown section {other}"),
                    })
                }
            });
            continue;
        }
        let Some(sec) = section else {
            return Err(GridError::Parse {
                line: lineno,
                msg: "record outside of any section".into(),
            });
        };
        match sec {
            Section::Buses => {
                let r = Record::parse(lineno, content, &["id", "name", "phases", "substation"])?;
                buses.push(Bus {
                    id: r.get("id")?,
                    name: r.raw("name")?.to_string(),
                    phases: r.phases("phases")?,
                    is_substation: r.flag("substation")?,
                });
            }
            Section::Lines => {
                let r = Record::parse(lineno, content, &["id", "from", "to", "r_pu", "x_pu"])?;
                lines.push(Line {
                    id: r.get("id")?,
                    from_bus: r.get("from")?,
                    to_bus: r.get("to")?,
                    r_pu: r.get("r_pu")?,
                    x_pu: r.get("x_pu")?,
                    has_switch: false,
                });
            }
            Section::Switches => {
                let r = Record::parse(lineno, content, &["line", "kind", "default"])?;
                let kind = match r.raw("kind")? {
                    "sectionalizing" => SwitchKind::Sectionalizing,
                    "tie" => SwitchKind::Tie,
                    other => return Err(r.err(format!("bad switch kind `{other}`"))),
                };
                let default_state = match r.opt("default") {
                    None => kind.default_state(),
                    Some("open") => SwitchState::Open,
                    Some("closed") => SwitchState::Closed,
                    Some(other) => return Err(r.err(format!("bad switch state `{other}`"))),
                };
                switches.push(Switch {
                    line_id: r.get("line")?,
                    kind,
                    default_state,
                });
            }
            Section::Loads => {
                let r = Record::parse(lineno, content, &["bus", "p_kw", "phases", "sheddable"])?;
                loads.push(Load {
                    bus_id: r.get("bus")?,
                    p_kw: r.get("p_kw")?,
                    phases: r.phases("phases")?,
                    sheddable: r.flag("sheddable")?,
                });
            }
            Section::Ders => {
                let r = Record::parse(lineno, content, &["bus", "kw", "mode"])?;
                let mode = match r.raw("mode")? {
                    "grid_forming" => DerMode::GridForming,
                    "grid_feeding" => DerMode::GridFeeding,
                    other => return Err(r.err(format!("bad der mode `{other}`"))),
                };
                ders.push(Der {
                    bus_id: r.get("bus")?,
                    rating_kw: r.get("kw")?,
                    mode,
                    enabled: true,
                });
            }
        }
    }

    NetworkGraph::new(buses, lines, switches, loads, ders)
}

fn phase_str(p: Phases) -> String {
    p.iter().map(|i| char::from(b'1' + i as u8)).collect()
}

/// Canonical text form; `load_network` of the output yields an equal graph.
pub fn serialize_network(g: &NetworkGraph) -> String {
    let mut out = String::new();
    out.push_str("[buses]\n");
    for b in g.buses() {
        let _ = writeln!(
            out,
            "id={},name={},phases={},substation={}",
            b.id,
            b.name,
            phase_str(b.phases),
            b.is_substation
        );
    }
    out.push_str("[lines]\n");
    for l in g.lines() {
        let _ = writeln!(
            out,
            "id={},from={},to={},r_pu={:?},x_pu={:?}",
            l.id, l.from_bus, l.to_bus, l.r_pu, l.x_pu
        );
    }
    out.push_str("[switches]\n");
    for s in g.switches() {
        let kind = match s.kind {
            SwitchKind::Sectionalizing => "sectionalizing",
            SwitchKind::Tie => "tie",
        };
        let state = match s.default_state {
            SwitchState::Open => "open",
            SwitchState::Closed => "closed",
        };
        let _ = writeln!(out, "line={},kind={kind},default={state}", s.line_id);
    }
    out.push_str("[loads]\n");
    for ld in g.loads() {
        let _ = writeln!(
            out,
            "bus={},p_kw={:?},phases={},sheddable={}",
            ld.bus_id,
            ld.p_kw,
            phase_str(ld.phases),
            ld.sheddable
        );
    }
    out.push_str("[ders]\n");
    for d in g.ders() {
        let mode = match d.mode {
            DerMode::GridForming => "grid_forming",
            DerMode::GridFeeding => "grid_feeding",
        };
        let _ = writeln!(out, "bus={},kw={:?},mode={mode}", d.bus_id, d.rating_kw);
    }
    out
}
