//! Hardware configuration and its flat `key = value` file format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteRowCost {
    /// SET and RESET phases run back to back.
    Sum,
    /// SET and RESET phases overlap.
    Max,
}

/// How the column vectors of a runtime matrix are laid out over array groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnPlacement {
    /// Arrays fill array groups contiguously, one column chain after another.
    Packed,
    /// Arrays fill array groups contiguously, chain position by chain
    /// position, so neighbouring arrays hold different columns.
    Interleaved,
    /// Every column chain starts in its own array group while groups last.
    Spread,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match self { $($ty::$variant => f.write_str($text)),* }
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s { $($text => Ok($ty::$variant),)* other => Err(format!("unknown value `{other}`")) }
            }
        }
    };
}

text_enum!(WriteRowCost { Sum => "sum", Max => "max" });
text_enum!(ColumnPlacement { Packed => "packed", Interleaved => "interleaved", Spread => "spread" });

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("not a boolean: `{other}`")),
    }
}

macro_rules! hardware_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every architectural parameter and simulator policy knob.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct HardwareConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for HardwareConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl HardwareConfig {
            /// Key names in file order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = parse_field::<$ty>(value)
                            .map_err(|e| SimError::Config(format!("{key}: {e}")))?;
                    } )*
                    other => return Err(SimError::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs for every field.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), self.$name.to_string()) ),*]
            }
        }
    };
}

trait FieldParse: Sized {
    fn parse_field(s: &str) -> std::result::Result<Self, String>;
}

impl FieldParse for bool {
    fn parse_field(s: &str) -> std::result::Result<Self, String> {
        parse_bool(s)
    }
}

macro_rules! field_via_fromstr {
    ($($t:ty),*) => {$(
        impl FieldParse for $t {
            fn parse_field(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("{e}"))
            }
        }
    )*};
}
field_via_fromstr!(usize, u32, f64, WriteRowCost, ColumnPlacement);

fn parse_field<T: FieldParse>(s: &str) -> std::result::Result<T, String> {
    T::parse_field(s)
}

hardware_config! {
    /// Crossbar rows.
    xb_rows: usize = 32,
    /// Crossbar columns.
    xb_cols: usize = 32,
    bits_per_cell: usize = 1,
    /// Arrays sharing one ADC, shift-add unit and register pair.
    arrays_per_ag: usize = 12,
    adc_per_ag: usize = 1,
    adc_resolution_bits: u32 = 8,
    dac_bits: u32 = 2,
    roa_ags_per_tile: usize = 11,
    wea_ags_per_tile: usize = 56,
    tiles: usize = 64,
    /// One VMM cycle: the ADC converting one array's column signals.
    cycle_ns: f64 = 25.0,
    set_ns: f64 = 1.52,
    reset_ns: f64 = 2.11,
    transfer_pj_per_bit: f64 = 7.0,
    /// On-chip interconnect bandwidth in GB/s.
    oci_gbps: f64 = 1000.0,
    /// Width of a full-precision fixed-point fraction.
    value_bits: u32 = 32,
    /// Width of the pruning path's quantized values.
    quant_bits: u32 = 4,
    xb_mw: f64 = 0.581,
    adc_mw: f64 = 2.0,
    /// DAC bank of one array group.
    dac_mw: f64 = 1.513,
    sh_mw: f64 = 0.074,
    ir_mw: f64 = 0.294,
    or_mw: f64 = 0.108,
    sa_mw: f64 = 0.051,
    recam_mw: f64 = 1.398,
    ait_mw: f64 = 36.89,
    ib_mw: f64 = 18.47,
    cb_mw: f64 = 74.21,
    ctrl_mw: f64 = 0.382,
    su_mw: f64 = 1.134,
    qu_mw: f64 = 0.121,
    dtc_mw: f64 = 494.07,
    ir_bytes: usize = 512,
    or_bytes: usize = 128,
    recam_rows: usize = 512,
    recam_cols: usize = 512,
    recam_count: usize = 2,
    ait_kb: usize = 64,
    ib_kb: usize = 32,
    cb_kb: usize = 128,
    write_row_cost_mode: WriteRowCost = WriteRowCost::Sum,
    /// Cycles per queued vector per array.
    bit_serial_factor: usize = 1,
    include_static_power: bool = false,
    column_placement: ColumnPlacement = ColumnPlacement::Interleaved,
    /// Output rows with identical match sets share one replica set in SpMM.
    spmm_row_sharing: bool = true,
    /// Controller dispatch cost per matched ReCAM row.
    ctrl_ns_per_match: f64 = 1.0,
    /// ReCAM search time per row.
    recam_search_ns: f64 = 25.0,
    /// Values consumed per cycle by each softmax, quantizer or binarizer unit.
    unit_values_per_cycle: usize = 32,
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("xb_rows", self.xb_rows),
            ("xb_cols", self.xb_cols),
            ("bits_per_cell", self.bits_per_cell),
            ("arrays_per_ag", self.arrays_per_ag),
            ("adc_per_ag", self.adc_per_ag),
            ("roa_ags_per_tile", self.roa_ags_per_tile),
            ("wea_ags_per_tile", self.wea_ags_per_tile),
            ("tiles", self.tiles),
            ("bit_serial_factor", self.bit_serial_factor),
            ("unit_values_per_cycle", self.unit_values_per_cycle),
            ("recam_rows", self.recam_rows),
            ("recam_cols", self.recam_cols),
            ("recam_count", self.recam_count),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(SimError::Config(format!("{k} must be positive")));
            }
        }
        if self.cycle_ns.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(SimError::Config("cycle_ns must be positive".into()));
        }
        if self.oci_gbps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(SimError::Config("oci_gbps must be positive".into()));
        }
        let nonneg = [
            ("set_ns", self.set_ns),
            ("reset_ns", self.reset_ns),
            ("transfer_pj_per_bit", self.transfer_pj_per_bit),
            ("ctrl_ns_per_match", self.ctrl_ns_per_match),
            ("recam_search_ns", self.recam_search_ns),
            ("xb_mw", self.xb_mw),
            ("adc_mw", self.adc_mw),
            ("dac_mw", self.dac_mw),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{k} must be non-negative")));
            }
        }
        for (k, bits) in [("value_bits", self.value_bits), ("quant_bits", self.quant_bits)] {
            if bits == 0 || bits as usize > self.row_bits() {
                return Err(SimError::Config(format!(
                    "{k} = {bits} does not fit a {}-bit crossbar row",
                    self.row_bits()
                )));
            }
        }
        if self.quant_bits < 2 {
            return Err(SimError::Config("quant_bits must be at least 2".into()));
        }
        Ok(())
    }

    /// Bits stored by one crossbar row.
    pub fn row_bits(&self) -> usize {
        self.xb_cols * self.bits_per_cell
    }

    /// Numbers of the given width that share one crossbar row.
    pub fn numbers_per_row(&self, value_bits: u32) -> usize {
        (self.row_bits() / value_bits as usize).max(1)
    }

    pub fn per_row_write_ns(&self) -> f64 {
        match self.write_row_cost_mode {
            WriteRowCost::Sum => self.set_ns + self.reset_ns,
            WriteRowCost::Max => self.set_ns.max(self.reset_ns),
        }
    }

    pub fn ags_per_tile(&self) -> usize {
        self.roa_ags_per_tile + self.wea_ags_per_tile
    }

    pub fn roa_ags(&self) -> usize {
        self.roa_ags_per_tile * self.tiles
    }

    pub fn wea_ags(&self) -> usize {
        self.wea_ags_per_tile * self.tiles
    }

    pub fn array_bits(&self) -> u64 {
        (self.xb_rows * self.xb_cols * self.bits_per_cell) as u64
    }

    pub fn tile_capacity_bits(&self) -> u64 {
        (self.ags_per_tile() * self.arrays_per_ag) as u64 * self.array_bits()
    }

    /// Parses a config file; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SimError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fully-resolved config in file syntax.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
