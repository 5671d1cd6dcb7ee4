import configparser
import logging
import math
import os
import re

from lab.chain import DEFAULT_S_GRID, InnovationLaw, ModelParams, ParamBox
from lab.mest import DEFAULT_B_DOMAIN
from lab.errors import ConfigError, ParameterDomainError

log = logging.getLogger("Config")

DEFAULT_N_LADDER = (250, 500, 1000, 2000, 4000, 8000)
DEFAULT_THETA = (0.3, 1.0, 0.2)

# section -> allowed keys; anything else in the file is rejected
SCHEMA = {
    "box": {"rho_bar", "m_a", "M_a", "m_b", "M_b", "p", "grid_rho", "grid_a", "grid_b"},
    "theta": {"rho0", "a0", "b0"},
    "innovation": {"kind", "df"},
    "experiment": {
        "n", "n_ladder", "R", "master_seed", "estimators", "functionals", "write_samples", "output_dir",
    },
    "estimator": {"b_domain", "b_target"},
    "drift": {"p", "s_grid"},
    "spectral": {"N", "L", "t_step", "functional"},
    "audit": {"estimator", "n", "R", "r_n", "d", "v3_max", "v6_max"},
    "rate_fit": {"input", "slope_lo", "slope_hi", "log_band", "stability_max", "floor_level"},
    "tolerance": {"grid_points", "golden_tol", "quad_tol", "power_tol", "power_max_iter"},
}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^#;\s=:][^=:]*?)\s*[=:]")
_INNOVATION_KINDS = {"gaussian": InnovationLaw.gaussian, "student": InnovationLaw.student}


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number; sections map (section, None)."""
    lines = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(raw)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, None), lineno)
            continue
        if raw[:1].isspace() or section is None:
            continue
        m = _KEY_RE.match(raw)
        if m:
            lines.setdefault((section, m.group(1).strip()), lineno)
    return lines


class Config:
    """Experiment configuration loaded from an INI file.

    Every key is optional; a missing file means all defaults. Unknown sections or keys and
    values that do not parse raise ConfigError with the key and its line.
    """

    def __init__(self, config_path=None, *, seed_override: int | None = None, output_override: str | None = None):
        self.config_path = config_path
        self._overrides = {"seed_override": seed_override, "output_override": output_override}
        self.config = configparser.ConfigParser(interpolation=None, default_section="\x00defaults")
        self.config.optionxform = str
        self._lines: dict = {}

        if config_path is not None:
            if not os.path.exists(config_path):
                raise ConfigError(f"config file not found: {config_path}")
            with open(config_path, encoding="utf-8") as f:
                text = f.read()
            self._parse(text)
            log.info("Loaded from: %s", config_path)
        else:
            log.info("No config file given, using defaults")
        self._reject_unknown()

        self.innovation = self._innovation()
        self.box = self._box()
        self.theta = self._theta()

        # Experiment
        self.n = self._getint("experiment", "n", 1000, minimum=1)
        self.n_ladder = tuple(self._getlist("experiment", "n_ladder", DEFAULT_N_LADDER, int, minimum=1))
        self.R = self._getint("experiment", "R", 2000, minimum=1)
        self.master_seed = self._getint("experiment", "master_seed", 20240601, minimum=0)
        if seed_override is not None:
            self.master_seed = int(seed_override)
        self.estimators = tuple(self._getlist("experiment", "estimators", ("rho", "b"), str))
        for est in self.estimators:
            if est not in ("rho", "b"):
                self._fail("experiment", "estimators", f"unknown estimator {est!r} (expected rho|b)")
        self.functionals = tuple(self._getlist("experiment", "functionals", (), str))
        for fn in self.functionals:
            if fn not in ("Fprime", "Fsecond_centered", "Xsq_centered"):
                self._fail("experiment", "functionals", f"unknown functional {fn!r}")
        self.write_samples = self._getbool("experiment", "write_samples", False)
        self.output_dir = output_override or self._get("experiment", "output_dir", "out")

        # Estimator
        self.b_domain = self._b_domain()
        self.b_target = self._get("estimator", "b_target", "theta").lower()
        if self.b_target not in ("theta", "box"):
            self._fail("estimator", "b_target", f"expected theta|box, got {self.b_target!r}")

        # Drift
        self.drift_p = self._getfloat("drift", "p", self.box.p, minimum=1.0)
        self.s_grid = tuple(self._getlist("drift", "s_grid", DEFAULT_S_GRID, float, minimum=0.0))

        # Spectral
        self.spectral_N = self._getint("spectral", "N", 401, minimum=3)
        if self.spectral_N % 2 == 0:
            self._fail("spectral", "N", f"node count must be odd, got {self.spectral_N}")
        self.spectral_L = self._getauto("spectral", "L", above=0.0)
        self.spectral_t_step = self._getauto("spectral", "t_step", above=0.0)
        self.spectral_functional = self._get("spectral", "functional", "Fprime")
        if self.spectral_functional not in ("Fprime", "Fsecond_centered", "Xsq_centered"):
            self._fail("spectral", "functional", f"unknown functional {self.spectral_functional!r}")

        # Audit
        self.audit_estimator = self._get("audit", "estimator", "b")
        if self.audit_estimator not in ("rho", "b"):
            self._fail("audit", "estimator", f"expected rho|b, got {self.audit_estimator!r}")
        self.audit_n = self._getint("audit", "n", 4000, minimum=2)
        self.audit_R = self._getint("audit", "R", 2000, minimum=1)
        self.audit_r_n = self._getauto("audit", "r_n")
        self.audit_d = self._getfloat("audit", "d", 0.25, minimum=0.0)
        self.audit_v3_max = self._getfloat("audit", "v3_max", 0.1, minimum=0.0)
        self.audit_v6_max = self._getfloat("audit", "v6_max", 0.02, minimum=0.0)

        # Rate-fit bands
        self.rate_fit_input = self._get("rate_fit", "input", "") or os.path.join(self.output_dir, "be_curve.csv")
        self.slope_lo = self._getfloat("rate_fit", "slope_lo", -0.65)
        self.slope_hi = self._getfloat("rate_fit", "slope_hi", -0.35)
        if not self.slope_lo < self.slope_hi:
            self._fail("rate_fit", "slope_hi", f"slope_lo < slope_hi required, got ({self.slope_lo}, {self.slope_hi})")
        self.log_band = self._getfloat("rate_fit", "log_band", 0.15, minimum=0.0)
        self.stability_max = self._getfloat("rate_fit", "stability_max", 2.5, minimum=1.0)
        self.floor_level = self._getfloat("rate_fit", "floor_level", 0.99, above=0.0)
        if not self.floor_level < 1.0:
            self._fail("rate_fit", "floor_level", f"must be < 1, got {self.floor_level}")

        # Numerical tolerances
        self.grid_points = self._getint("tolerance", "grid_points", 512, minimum=3)
        self.golden_tol = self._getfloat("tolerance", "golden_tol", 1e-10, above=0.0)
        self.quad_tol = self._getfloat("tolerance", "quad_tol", 1e-8, above=0.0)
        self.power_tol = self._getfloat("tolerance", "power_tol", 1e-12, above=0.0)
        self.power_max_iter = self._getint("tolerance", "power_max_iter", 20000, minimum=1)

    def _parse(self, text: str) -> None:
        try:
            self.config.read_string(text, source=str(self.config_path))
        except configparser.MissingSectionHeaderError as e:
            raise ConfigError("key outside of any [section]", line=e.lineno) from e
        except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
            raise ConfigError(e.message.split(":", 1)[-1].strip(), line=e.lineno) from e
        except configparser.ParsingError as e:
            lineno, line = e.errors[0]
            raise ConfigError(f"cannot parse {line.strip()!r}", line=lineno) from e
        self._lines = _line_index(text)

    def _reject_unknown(self) -> None:
        for section in self.config.sections():
            if section not in SCHEMA:
                raise ConfigError("unknown section", key=f"[{section}]", line=self._lines.get((section, None)))
            for key in self.config.options(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key in [{section}]", key=key, line=self._lines.get((section, key)))

    def _fail(self, section, key, message):
        raise ConfigError(message, key=key, line=self._lines.get((section, key)))

    def _get(self, section, key, fallback=""):
        try:
            value = self.config.get(section, key).strip()
            return value if value else fallback
        except (configparser.NoSectionError, configparser.NoOptionError):
            return fallback

    def _number(self, section, key, fallback, cast, minimum, above=None):
        raw = self._get(section, key, None)
        if raw is None:
            return fallback
        try:
            value = cast(raw)
        except ValueError:
            self._fail(section, key, f"expected {cast.__name__}, got {raw!r}")
        if isinstance(value, float) and not math.isfinite(value):
            self._fail(section, key, f"must be finite, got {raw!r}")
        if minimum is not None and value < minimum:
            self._fail(section, key, f"must be >= {minimum}, got {value}")
        if above is not None and not value > above:
            self._fail(section, key, f"must be > {above}, got {value}")
        return value

    def _getint(self, section, key, fallback=0, *, minimum=None):
        return self._number(section, key, fallback, int, minimum)

    def _getfloat(self, section, key, fallback=0.0, *, minimum=None, above=None):
        return self._number(section, key, fallback, float, minimum, above)

    def _getauto(self, section, key, *, above=None):
        """Float value, or None for `auto` / missing."""
        if self._get(section, key, "auto").lower() == "auto":
            return None
        if above is not None:
            return self._getfloat(section, key, above=above)
        return self._getfloat(section, key, minimum=0.0)

    def _getbool(self, section, key, fallback=False):
        raw = self._get(section, key, "").lower()
        if raw == "":
            return fallback
        if raw in ("true", "1", "yes", "on"):
            return True
        if raw in ("false", "0", "no", "off"):
            return False
        self._fail(section, key, f"expected true|false, got {raw!r}")

    def _getlist(self, section, key, fallback=(), cast=str, *, minimum=None):
        raw = self._get(section, key, None)
        if raw is None:
            return list(fallback)
        out = []
        for item in (s.strip() for s in raw.split(",")):
            if not item:
                continue
            try:
                value = cast(item)
            except ValueError:
                self._fail(section, key, f"expected a comma-separated list of {cast.__name__}, got {item!r}")
            if minimum is not None and value < minimum:
                self._fail(section, key, f"entries must be >= {minimum}, got {value}")
            out.append(value)
        return out

    def _domain(self, section, build):
        """Run a model constructor, reporting domain errors against the config key."""
        try:
            return build()
        except ParameterDomainError as e:
            raise ConfigError(str(e), key=e.field, line=self._lines.get((section, e.field))) from e

    def _innovation(self) -> InnovationLaw:
        kind = self._get("innovation", "kind", "gaussian").lower()
        if kind not in _INNOVATION_KINDS:
            self._fail("innovation", "kind", f"expected gaussian|student, got {kind!r}")
        if kind == "gaussian":
            return InnovationLaw.gaussian()
        df = self._getint("innovation", "df", 30)
        return self._domain("innovation", lambda: InnovationLaw.student(df))

    def _box(self) -> ParamBox:
        kwargs = {k: self._getfloat("box", k, d) for k, d in
                  (("rho_bar", 0.1), ("m_a", 0.5), ("M_a", 1.0), ("m_b", 0.01), ("M_b", 0.04))}
        p = self._getfloat("box", "p", 7.0)
        grid = {k: self._getint("box", f"grid_{k}", 3 if k != "rho" else 5, minimum=1) for k in ("rho", "a", "b")}
        return self._domain("box", lambda: ParamBox.lattice(
            **kwargs, p=p, innovation=self.innovation, n_rho=grid["rho"], n_a=grid["a"], n_b=grid["b"],
        ))

    def _b_domain(self) -> tuple[float, float]:
        bounds = self._getlist("estimator", "b_domain", DEFAULT_B_DOMAIN, float)
        if len(bounds) != 2:
            self._fail("estimator", "b_domain", f"expected two bounds lo, hi, got {len(bounds)} values")
        lo, hi = bounds
        if not 0.0 < lo < hi < 1.0:
            self._fail("estimator", "b_domain", f"0 < lo < hi < 1 required, got ({lo}, {hi})")
        return float(lo), float(hi)

    def _theta(self) -> ModelParams:
        rho0, a0, b0 = (self._getfloat("theta", k, d) for k, d in zip(("rho0", "a0", "b0"), DEFAULT_THETA))
        return self._domain("theta", lambda: ModelParams(rho0, a0, b0, self.innovation, self.box.p))

    def to_dict(self) -> dict:
        """Resolved settings, as recorded in the run manifest."""
        return {
            "box": self.box.to_dict(),
            "theta": self.theta.to_dict(),
            "experiment": {
                "n": self.n,
                "n_ladder": list(self.n_ladder),
                "R": self.R,
                "master_seed": self.master_seed,
                "estimators": list(self.estimators),
                "functionals": list(self.functionals),
                "write_samples": self.write_samples,
                "output_dir": self.output_dir,
            },
            "estimator": {"b_domain": list(self.b_domain), "b_target": self.b_target},
            "drift": {"p": self.drift_p, "s_grid": list(self.s_grid)},
            "spectral": {
                "N": self.spectral_N,
                "L": self.spectral_L,
                "t_step": self.spectral_t_step,
                "functional": self.spectral_functional,
            },
            "audit": {
                "estimator": self.audit_estimator,
                "n": self.audit_n,
                "R": self.audit_R,
                "r_n": self.audit_r_n,
                "d": self.audit_d,
                "v3_max": self.audit_v3_max,
                "v6_max": self.audit_v6_max,
            },
            "rate_fit": {
                "input": self.rate_fit_input,
                "slope_lo": self.slope_lo,
                "slope_hi": self.slope_hi,
                "log_band": self.log_band,
                "stability_max": self.stability_max,
                "floor_level": self.floor_level,
            },
            "tolerance": {
                "grid_points": self.grid_points,
                "golden_tol": self.golden_tol,
                "quad_tol": self.quad_tol,
                "power_tol": self.power_tol,
                "power_max_iter": self.power_max_iter,
            },
        }

    def log_config(self):
        """Log the current settings for debugging."""
        log.info("Current settings:")
        log.info("  Box: rho_bar=%g a in [%g, %g] b in [%g, %g] p=%g (%d grid points)",
                 self.box.rho_bar, self.box.m_a, self.box.M_a, self.box.m_b, self.box.M_b,
                 self.box.p, len(self.box.grid))
        log.info("  Theta: %s", self.theta.theta_id)
        log.info("  Innovation: %s", self.innovation.to_dict())
        log.info("  n ladder: %s, R=%d, master_seed=%d", list(self.n_ladder), self.R, self.master_seed)
        log.info("  b domain: %s, b curve on %s", self.b_domain, self.b_target)
        log.info("  Output dir: %s", self.output_dir)

    def reload(self):
        """Re-read the config file and re-initialize all fields."""
        self.__init__(self.config_path, **self._overrides)
