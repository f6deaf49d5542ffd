use serde::Serialize;
use serde_json::Value;

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
}

/// Envelope written by every subcommand: who produced it, with which
/// resolved settings, and the command-specific result.
#[derive(Debug, Clone, Serialize)]
pub struct Report<R: Serialize> {
    pub tool: ToolInfo,
    pub command: &'static str,
    pub config: Value,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub result: R,
}

impl<R: Serialize> Report<R> {
    pub fn new(command: &'static str, config: Value, warnings: Vec<String>, result: R) -> Self {
        Report {
            tool: ToolInfo {
                name: TOOL_NAME,
                version: TOOL_VERSION,
            },
            command,
            config,
            warnings,
            result,
        }
    }
}
