//! On-disk formats: system descriptions and self-contained certificates.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lyap::LyapunovCertificate;
use crate::multi::MultiLyapunovCertificate;
use crate::poly::{Polynomial, PolynomialMap, SwitchedSystem};
use crate::roa::RoaCertificate;
use crate::sosprog::{GramCertificate, SosConvexCertificate, VerificationReport, VerifyTolerance};

/// One mode, either as a polynomial map or as a matrix `x ↦ Ax`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModeSpec {
    Matrix { matrix: Vec<Vec<f64>> },
    Map { components: Vec<Polynomial> },
}

impl ModeSpec {
    pub fn from_map(f: &PolynomialMap) -> Self {
        ModeSpec::Map {
            components: f.components().to_vec(),
        }
    }

    pub fn from_matrix(a: &DMatrix<f64>) -> Self {
        ModeSpec::Matrix {
            matrix: (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect(),
        }
    }

    pub fn to_map(&self) -> Result<PolynomialMap> {
        match self {
            ModeSpec::Matrix { matrix } => {
                let a = crate::json::matrix_rows::from_rows(matrix).map_err(Error::InvalidInput)?;
                PolynomialMap::from_matrix(&a)
            }
            ModeSpec::Map { components } => PolynomialMap::new(components.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemFile {
    pub n: usize,
    pub modes: Vec<ModeSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl SystemFile {
    pub fn from_system(system: &SwitchedSystem) -> Self {
        let modes = if system.is_linear() {
            system.matrices().iter().map(ModeSpec::from_matrix).collect()
        } else {
            system.modes().iter().map(ModeSpec::from_map).collect()
        };
        SystemFile {
            n: system.dim(),
            modes,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn to_system(&self) -> Result<SwitchedSystem> {
        let modes = self.modes.iter().map(ModeSpec::to_map).collect::<Result<Vec<_>>>()?;
        let system = SwitchedSystem::new(modes)?;
        if system.dim() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: system.dim(),
            });
        }
        Ok(system)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: SystemFile = serde_json::from_str(text)?;
        file.to_system()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Certificate document tagged by `kind`; verifiable without solving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CertificateFile {
    Sos {
        polynomial: Polynomial,
        certificate: GramCertificate,
    },
    Sosconvex {
        polynomial: Polynomial,
        certificate: SosConvexCertificate,
    },
    /// Common Lyapunov function for the matrices divided by `gamma` (1 when
    /// absent).
    Lyapunov {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
        certificate: LyapunovCertificate,
    },
    Roa {
        certificate: RoaCertificate,
    },
    Multi {
        certificate: MultiLyapunovCertificate,
    },
}

impl CertificateFile {
    pub fn kind(&self) -> &'static str {
        match self {
            CertificateFile::Sos { .. } => "sos",
            CertificateFile::Sosconvex { .. } => "sosconvex",
            CertificateFile::Lyapunov { .. } => "lyapunov",
            CertificateFile::Roa { .. } => "roa",
            CertificateFile::Multi { .. } => "multi",
        }
    }

    pub fn needs_system(&self) -> bool {
        !matches!(self, CertificateFile::Sos { .. } | CertificateFile::Sosconvex { .. })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Recheck residuals, Gram spectra and identities.
    pub fn verify(&self, system: Option<&SwitchedSystem>, tol: &VerifyTolerance) -> Result<VerificationReport> {
        let need = || system.ok_or_else(|| Error::InvalidInput(format!("a {} certificate needs a system", self.kind())));
        let linear = |s: &SwitchedSystem| -> Result<Vec<DMatrix<f64>>> {
            if !s.is_linear() {
                return Err(Error::InvalidInput("this certificate needs a linear system".into()));
            }
            Ok(s.matrices())
        };
        match self {
            CertificateFile::Sos {
                polynomial,
                certificate,
            } => {
                let mut r = VerificationReport::new();
                r.add_gram("sos", certificate, polynomial, tol);
                Ok(r)
            }
            CertificateFile::Sosconvex {
                polynomial,
                certificate,
            } => {
                let mut r = VerificationReport::new();
                match certificate.check(polynomial) {
                    Ok(chk) => r.add_check("sosconvex", chk, tol),
                    Err(e) => r.add_failure("sosconvex", e.to_string()),
                }
                Ok(r)
            }
            CertificateFile::Lyapunov { gamma, certificate } => {
                let g = gamma.unwrap_or(1.0);
                if !(g > 0.0) {
                    return Err(Error::InvalidInput(format!("gamma must be positive, got {g}")));
                }
                let mats: Vec<DMatrix<f64>> = linear(need()?)?.iter().map(|a| a / g).collect();
                certificate.verify(&mats, tol)
            }
            CertificateFile::Roa { certificate } => certificate.verify(need()?, tol),
            CertificateFile::Multi { certificate } => certificate.verify(&linear(need()?)?, tol),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn linear_systems_round_trip_as_matrices() {
        let sys = corpus::ando_shih_system(0.9);
        let file = SystemFile::from_system(&sys).with_meta("gamma", 0.9);
        assert!(matches!(file.modes[0], ModeSpec::Matrix { .. }));
        let text = crate::json::to_string(&file).unwrap();
        let back = SystemFile::parse(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_system().unwrap().matrices(), sys.matrices());
    }

    #[test]
    fn matrix_and_map_forms_agree() {
        let sys = corpus::ando_shih_system(0.5);
        let as_maps = SystemFile {
            n: 2,
            modes: sys.modes().iter().map(ModeSpec::from_map).collect(),
            meta: BTreeMap::new(),
        };
        assert_eq!(as_maps.to_system().unwrap().modes(), sys.modes());
    }

    #[test]
    fn dimension_is_checked() {
        let text = r#"{"n": 3, "modes": [{"matrix": [[1.0, 0.0], [0.0, 1.0]]}]}"#;
        assert!(SystemFile::parse(text).is_err());
        assert!(SystemFile::parse(r#"{"n": 1, "modes": [{"matrix": [[1.0, 2.0]]}]}"#).is_err());
    }

    #[test]
    fn nonlinear_round_trip() {
        let file = SystemFile::from_system(&corpus::quadratic_pair());
        let text = crate::json::to_string(&file).unwrap();
        assert_eq!(SystemFile::parse(&text).unwrap(), file);
    }

    #[test]
    fn certificate_needs_system() {
        let sys = corpus::contraction();
        let v = corpus::unit_disk_v();
        let cert = crate::roa::roa_certify(&sys, &v, 1.0, &crate::roa::RoaOptions::new(2))
            .unwrap()
            .feasible()
            .unwrap();
        let file = CertificateFile::Roa { certificate: cert };
        assert!(file.verify(None, &VerifyTolerance::default()).is_err());
        assert!(file.verify(Some(&sys), &VerifyTolerance::default()).unwrap().passed());
        let text = crate::json::to_string(&file).unwrap();
        assert_eq!(CertificateFile::parse(&text).unwrap(), file);
    }
}
