//! Demo configurations shipped with the binary.

pub struct Demo {
    pub name: &'static str,
    pub config: &'static str,
}

pub const DEMOS: &[Demo] = &[
    Demo { name: "p-laplace-rates", config: include_str!("../demos/p-laplace-rates.toml") },
    Demo { name: "semilinear-lipschitz", config: include_str!("../demos/semilinear-lipschitz.toml") },
    Demo { name: "material-derivative", config: include_str!("../demos/material-derivative.toml") },
    Demo { name: "static-shape-derivative", config: include_str!("../demos/static-shape-derivative.toml") },
    Demo { name: "damage-run", config: include_str!("../demos/damage-run.toml") },
    Demo { name: "damage-dj", config: include_str!("../demos/damage-dj.toml") },
    Demo { name: "shape-descent", config: include_str!("../demos/shape-descent.toml") },
];

pub fn find(name: &str) -> Option<&'static Demo> {
    DEMOS.iter().find(|d| d.name == name)
}

impl Demo {
    /// Leading comment block of the config, joined into one line.
    pub fn description(&self) -> String {
        let lines: Vec<&str> = self.config.lines().map_while(|l| l.strip_prefix('#')).map(str::trim).collect();
        lines.join(" ")
    }
}
