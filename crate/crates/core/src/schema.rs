//! PII field taxonomy, drawer categories, access tiers and contextual scope
//! enforcement.
//!
//! Everything in here is pure: the policy table is compiled in and the scope
//! arithmetic operates on a ten-bit set, so these functions are safe to call
//! from any thread.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum length of a profile value, in UTF-8 bytes.
pub const MAX_VALUE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("unknown PII field identifier `{0}`")]
    UnknownField(String),
    #[error("duplicate PII field `{0}` in scope list")]
    DuplicateField(PiiField),
    #[error("unknown {kind} literal `{value}`")]
    UnknownLiteral { kind: &'static str, value: String },
}

/// Failures of contextual scope enforcement. Both map to wire code 4002.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CseError {
    #[error("requested scope set is empty")]
    EmptyRequest,
    #[error("sign-in request carries no Contact-drawer identifier")]
    NoPrimaryIdentifier,
    #[error("sign-up request has no field allowed by the tier policy")]
    EmptyAuthorizedScope,
}

/// One of the ten PII fields known to the vault, in schema order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PiiField {
    FirstName,
    LastName,
    Email,
    Phone,
    Street,
    City,
    Zip,
    Country,
    Gender,
    DateOfBirth,
}

impl PiiField {
    pub const ALL: [PiiField; 10] = [
        PiiField::FirstName,
        PiiField::LastName,
        PiiField::Email,
        PiiField::Phone,
        PiiField::Street,
        PiiField::City,
        PiiField::Zip,
        PiiField::Country,
        PiiField::Gender,
        PiiField::DateOfBirth,
    ];

    /// The wire identifier, e.g. `"dateOfBirth"`.
    pub fn as_str(self) -> &'static str {
        match self {
            PiiField::FirstName => "firstName",
            PiiField::LastName => "lastName",
            PiiField::Email => "email",
            PiiField::Phone => "phone",
            PiiField::Street => "street",
            PiiField::City => "city",
            PiiField::Zip => "zip",
            PiiField::Country => "country",
            PiiField::Gender => "gender",
            PiiField::DateOfBirth => "dateOfBirth",
        }
    }

    /// Position in schema order (0..10).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<PiiField> {
        PiiField::ALL.get(index).copied()
    }

    pub fn drawer(self) -> DrawerCategory {
        classify(self).0
    }

    pub fn tier(self) -> AccessTier {
        classify(self).1
    }

    fn bit(self) -> u16 {
        1 << self.index()
    }
}

impl fmt::Display for PiiField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiiField {
    type Err = SchemaError;

    /// Exact, case-sensitive match against the schema literals.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PiiField::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| SchemaError::UnknownField(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DrawerCategory {
    Identity,
    Contact,
    Address,
    Demographics,
}

impl DrawerCategory {
    pub const ALL: [DrawerCategory; 4] = [
        DrawerCategory::Identity,
        DrawerCategory::Contact,
        DrawerCategory::Address,
        DrawerCategory::Demographics,
    ];

    pub fn fields(self) -> ScopeSet {
        PiiField::ALL
            .into_iter()
            .filter(|f| f.drawer() == self)
            .collect()
    }
}

impl fmt::Display for DrawerCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Developer access tier granted by the partnership manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccessTier {
    Standard,
    Premium,
}

impl fmt::Display for AccessTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for AccessTier {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Standard" => Ok(AccessTier::Standard),
            "Premium" => Ok(AccessTier::Premium),
            other => Err(SchemaError::UnknownLiteral {
                kind: "tier",
                value: other.to_owned(),
            }),
        }
    }
}

/// Workflow the application declares when it asks for identity data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RequestContext {
    #[serde(rename = "SIGN_IN")]
    SignIn,
    #[serde(rename = "SIGN_UP")]
    SignUp,
}

impl RequestContext {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestContext::SignIn => "SIGN_IN",
            RequestContext::SignUp => "SIGN_UP",
        }
    }
}

impl fmt::Display for RequestContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RequestContext {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SIGN_IN" => Ok(RequestContext::SignIn),
            "SIGN_UP" => Ok(RequestContext::SignUp),
            other => Err(SchemaError::UnknownLiteral {
                kind: "request context",
                value: other.to_owned(),
            }),
        }
    }
}

/// A duplicate-free set of PII fields, stored as a ten-bit mask.
///
/// Serializes as a JSON list of field identifiers in schema order.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ScopeSet(u16);

impl ScopeSet {
    const MASK: u16 = (1 << 10) - 1;

    pub const fn empty() -> ScopeSet {
        ScopeSet(0)
    }

    pub const fn full() -> ScopeSet {
        ScopeSet(Self::MASK)
    }

    /// Builds a set from raw bits; bits outside the ten-field domain are dropped.
    pub const fn from_bits_truncate(bits: u16) -> ScopeSet {
        ScopeSet(bits & Self::MASK)
    }

    pub const fn bits(self) -> u16 {
        self.0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, field: PiiField) -> bool {
        self.0 & field.bit() != 0
    }

    /// Returns `false` if the field was already present.
    pub fn insert(&mut self, field: PiiField) -> bool {
        let had = self.contains(field);
        self.0 |= field.bit();
        !had
    }

    pub fn remove(&mut self, field: PiiField) -> bool {
        let had = self.contains(field);
        self.0 &= !field.bit();
        had
    }

    pub fn intersection(self, other: ScopeSet) -> ScopeSet {
        ScopeSet(self.0 & other.0)
    }

    pub fn union(self, other: ScopeSet) -> ScopeSet {
        ScopeSet(self.0 | other.0)
    }

    pub fn difference(self, other: ScopeSet) -> ScopeSet {
        ScopeSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: ScopeSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Members in schema order.
    pub fn iter(self) -> impl Iterator<Item = PiiField> {
        PiiField::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    /// Builds a set from a list, rejecting duplicates.
    pub fn try_from_fields<I: IntoIterator<Item = PiiField>>(
        fields: I,
    ) -> Result<ScopeSet, SchemaError> {
        let mut set = ScopeSet::empty();
        for f in fields {
            if !set.insert(f) {
                return Err(SchemaError::DuplicateField(f));
            }
        }
        Ok(set)
    }

    /// Parses wire identifiers, rejecting unknown names and duplicates.
    pub fn parse_names<S: AsRef<str>>(names: &[S]) -> Result<ScopeSet, SchemaError> {
        let fields = names
            .iter()
            .map(|n| n.as_ref().parse::<PiiField>())
            .collect::<Result<Vec<_>, _>>()?;
        ScopeSet::try_from_fields(fields)
    }

    pub fn names(self) -> Vec<&'static str> {
        self.iter().map(PiiField::as_str).collect()
    }
}

impl FromIterator<PiiField> for ScopeSet {
    fn from_iter<I: IntoIterator<Item = PiiField>>(iter: I) -> Self {
        let mut set = ScopeSet::empty();
        for f in iter {
            set.insert(f);
        }
        set
    }
}

impl<const N: usize> From<[PiiField; N]> for ScopeSet {
    fn from(fields: [PiiField; N]) -> Self {
        fields.into_iter().collect()
    }
}

impl fmt::Debug for ScopeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set()
            .entries(self.iter().map(PiiField::as_str))
            .finish()
    }
}

impl fmt::Display for ScopeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.names().join(", "))
    }
}

impl Serialize for ScopeSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.len()))?;
        for f in self.iter() {
            seq.serialize_element(&f)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for ScopeSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ScopeVisitor;

        impl<'de> Visitor<'de> for ScopeVisitor {
            type Value = ScopeSet;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a list of unique PII field identifiers")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<ScopeSet, A::Error> {
                let mut set = ScopeSet::empty();
                while let Some(name) = seq.next_element::<std::borrow::Cow<'de, str>>()? {
                    let field = name.parse::<PiiField>().map_err(de::Error::custom)?;
                    if !set.insert(field) {
                        return Err(de::Error::custom(SchemaError::DuplicateField(field)));
                    }
                }
                Ok(set)
            }
        }

        deserializer.deserialize_seq(ScopeVisitor)
    }
}

/// Allowed field set for one (tier, context) cell of the policy table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierPolicy {
    pub tier: AccessTier,
    pub context: RequestContext,
    pub allowed: ScopeSet,
}

/// Drawer and tier of a field.
pub fn classify(field: PiiField) -> (DrawerCategory, AccessTier) {
    use AccessTier::*;
    use DrawerCategory::*;
    match field {
        PiiField::FirstName | PiiField::LastName => (Identity, Premium),
        PiiField::Email | PiiField::Phone => (Contact, Standard),
        PiiField::Street | PiiField::City | PiiField::Zip | PiiField::Country => (Address, Premium),
        PiiField::Gender | PiiField::DateOfBirth => (Demographics, Premium),
    }
}

/// Classifies a wire identifier, rejecting anything outside the schema.
pub fn classify_name(name: &str) -> Result<(DrawerCategory, AccessTier), SchemaError> {
    name.parse::<PiiField>().map(classify)
}

/// The allowed set does not depend on the context; sign-in cardinality is
/// applied by [`enforce_cse`].
pub fn fetch_policy(tier: AccessTier, ctx: RequestContext) -> TierPolicy {
    let allowed = match tier {
        AccessTier::Standard => DrawerCategory::Contact.fields(),
        AccessTier::Premium => ScopeSet::full(),
    };
    TierPolicy {
        tier,
        context: ctx,
        allowed,
    }
}

/// The full 2x2 policy table, for export to operator tooling.
pub fn policy_table() -> Vec<TierPolicy> {
    let mut table = Vec::with_capacity(4);
    for tier in [AccessTier::Standard, AccessTier::Premium] {
        for ctx in [RequestContext::SignIn, RequestContext::SignUp] {
            table.push(fetch_policy(tier, ctx));
        }
    }
    table
}

/// Picks the single sign-in identifier: email if requested, else phone.
pub fn select_primary_id(req: ScopeSet) -> Result<PiiField, CseError> {
    if req.is_empty() {
        return Err(CseError::EmptyRequest);
    }
    [PiiField::Email, PiiField::Phone]
        .into_iter()
        .find(|f| req.contains(*f))
        .ok_or(CseError::NoPrimaryIdentifier)
}

/// Truncates a requested scope set to what the tier and context permit.
pub fn enforce_cse(
    tier: AccessTier,
    ctx: RequestContext,
    req: ScopeSet,
) -> Result<ScopeSet, CseError> {
    if req.is_empty() {
        return Err(CseError::EmptyRequest);
    }
    match ctx {
        RequestContext::SignIn => select_primary_id(req).map(|f| ScopeSet::from([f])),
        RequestContext::SignUp => {
            let authorized = req.intersection(fetch_policy(tier, ctx).allowed);
            if authorized.is_empty() {
                Err(CseError::EmptyAuthorizedScope)
            } else {
                Ok(authorized)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use PiiField::*;

    // drawer/tier table transcribed row by row; independent of `classify`'s match arms.
    const TABLE: [(&str, &[&str], &str); 4] = [
        ("Identity", &["firstName", "lastName"], "Premium"),
        ("Contact", &["email", "phone"], "Standard"),
        ("Address", &["street", "city", "zip", "country"], "Premium"),
        ("Demographics", &["gender", "dateOfBirth"], "Premium"),
    ];

    fn table_fields_with_tier(tier: &str) -> ScopeSet {
        TABLE
            .iter()
            .filter(|(_, _, t)| *t == tier)
            .flat_map(|(_, fs, _)| fs.iter().map(|n| n.parse::<PiiField>().unwrap()))
            .collect()
    }

    #[test]
    fn classify_matches_table() {
        assert_eq!(
            classify(Email),
            (DrawerCategory::Contact, AccessTier::Standard)
        );
        assert_eq!(
            classify(DateOfBirth),
            (DrawerCategory::Demographics, AccessTier::Premium)
        );
        assert_eq!(
            classify(Street),
            (DrawerCategory::Address, AccessTier::Premium)
        );

        let mut seen = ScopeSet::empty();
        for (drawer, fields, tier) in TABLE {
            for name in fields {
                let (d, t) = classify_name(name).unwrap();
                assert_eq!(format!("{d}"), drawer);
                assert_eq!(format!("{t}"), tier);
                assert!(seen.insert(name.parse().unwrap()));
            }
        }
        assert_eq!(seen, ScopeSet::full());
    }

    #[test]
    fn unknown_identifier_is_schema_violation() {
        assert_eq!(
            classify_name("Email"),
            Err(SchemaError::UnknownField("Email".into()))
        );
        assert!(classify_name("streetAddress").is_err());
    }

    #[test]
    fn drawer_partition() {
        assert_eq!(
            DrawerCategory::Contact.fields(),
            ScopeSet::from([Email, Phone])
        );
        assert_eq!(
            DrawerCategory::Identity.fields(),
            ScopeSet::from([FirstName, LastName])
        );
        assert_eq!(
            DrawerCategory::Address.fields(),
            ScopeSet::from([Street, City, Zip, Country])
        );
        assert_eq!(
            DrawerCategory::Demographics.fields(),
            ScopeSet::from([Gender, DateOfBirth])
        );
    }

    #[test]
    fn policy_cells() {
        let standard = table_fields_with_tier("Standard");
        assert_eq!(standard, ScopeSet::from([Email, Phone]));
        for ctx in [RequestContext::SignIn, RequestContext::SignUp] {
            assert_eq!(fetch_policy(AccessTier::Standard, ctx).allowed, standard);
        }
        assert_eq!(
            fetch_policy(AccessTier::Premium, RequestContext::SignUp).allowed,
            ScopeSet::full()
        );
        assert_eq!(policy_table().len(), 4);
    }

    #[test]
    fn primary_id_selection() {
        let req = ScopeSet::from([Email, FirstName, LastName, Street, DateOfBirth]);
        assert_eq!(select_primary_id(req), Ok(Email));
        assert_eq!(select_primary_id(ScopeSet::from([Phone])), Ok(Phone));
        assert_eq!(select_primary_id(ScopeSet::from([Email, Phone])), Ok(Email));

        let no_contact = ScopeSet::from([FirstName, Gender]);
        assert!(no_contact
            .intersection(table_fields_with_tier("Standard"))
            .is_empty());
        assert_eq!(
            select_primary_id(no_contact),
            Err(CseError::NoPrimaryIdentifier)
        );
    }

    #[test]
    fn cse_examples() {
        let t1 = ScopeSet::from([Email, FirstName, LastName, Street, DateOfBirth]);
        assert_eq!(
            enforce_cse(AccessTier::Standard, RequestContext::SignIn, t1),
            Ok(ScopeSet::from([Email]))
        );

        let signup = ScopeSet::from([Email, Phone, FirstName, Street, DateOfBirth]);
        let oracle: ScopeSet = signup
            .iter()
            .filter(|f| table_fields_with_tier("Standard").contains(*f))
            .collect();
        assert_eq!(oracle, ScopeSet::from([Email, Phone]));
        assert_eq!(
            enforce_cse(AccessTier::Standard, RequestContext::SignUp, signup),
            Ok(oracle)
        );

        let premium = ScopeSet::from([Email, Gender]);
        assert_eq!(
            enforce_cse(AccessTier::Premium, RequestContext::SignUp, premium),
            Ok(premium)
        );
    }

    #[test]
    fn cse_errors() {
        assert_eq!(
            enforce_cse(
                AccessTier::Standard,
                RequestContext::SignUp,
                ScopeSet::from([Gender, Street])
            ),
            Err(CseError::EmptyAuthorizedScope)
        );
        assert_eq!(
            enforce_cse(
                AccessTier::Premium,
                RequestContext::SignIn,
                ScopeSet::from([Gender])
            ),
            Err(CseError::NoPrimaryIdentifier)
        );
        assert_eq!(
            enforce_cse(
                AccessTier::Premium,
                RequestContext::SignUp,
                ScopeSet::empty()
            ),
            Err(CseError::EmptyRequest)
        );
    }

    #[test]
    fn scope_set_serde() {
        let set = ScopeSet::from([DateOfBirth, Email]);
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(json, r#"["email","dateOfBirth"]"#);
        assert_eq!(serde_json::from_str::<ScopeSet>(&json).unwrap(), set);
        assert!(serde_json::from_str::<ScopeSet>(r#"["Email"]"#).is_err());
        assert!(serde_json::from_str::<ScopeSet>(r#"["email","email"]"#).is_err());
        assert_eq!(
            serde_json::to_string(&RequestContext::SignIn).unwrap(),
            r#""SIGN_IN""#
        );
    }

    fn any_scope() -> impl Strategy<Value = ScopeSet> {
        (0u16..1024).prop_map(ScopeSet::from_bits_truncate)
    }

    fn any_tier() -> impl Strategy<Value = AccessTier> {
        prop_oneof![Just(AccessTier::Standard), Just(AccessTier::Premium)]
    }

    fn any_ctx() -> impl Strategy<Value = RequestContext> {
        prop_oneof![Just(RequestContext::SignIn), Just(RequestContext::SignUp)]
    }

    proptest! {
        #[test]
        fn result_is_subset_of_request(tier in any_tier(), ctx in any_ctx(), req in any_scope()) {
            if let Ok(auth) = enforce_cse(tier, ctx, req) {
                prop_assert!(auth.is_subset(req));
                prop_assert!(!auth.is_empty());
            }
        }

        #[test]
        fn sign_in_yields_exactly_one(tier in any_tier(), req in any_scope()) {
            let contact = DrawerCategory::Contact.fields();
            let res = enforce_cse(tier, RequestContext::SignIn, req);
            if req.intersection(contact).is_empty() {
                prop_assert!(res.is_err());
            } else {
                prop_assert_eq!(res.unwrap().len(), 1);
            }
        }

        #[test]
        fn standard_sign_up_stays_in_contact(req in any_scope()) {
            if let Ok(auth) = enforce_cse(AccessTier::Standard, RequestContext::SignUp, req) {
                prop_assert!(auth.is_subset(ScopeSet::from([Email, Phone])));
            }
        }

        #[test]
        fn premium_dominates_standard(ctx in any_ctx(), req in any_scope()) {
            if let (Ok(s), Ok(p)) = (
                enforce_cse(AccessTier::Standard, ctx, req),
                enforce_cse(AccessTier::Premium, ctx, req),
            ) {
                prop_assert!(s.is_subset(p));
            }
        }

        #[test]
        fn enforcement_is_idempotent(tier in any_tier(), ctx in any_ctx(), req in any_scope()) {
            if let Ok(once) = enforce_cse(tier, ctx, req) {
                prop_assert_eq!(enforce_cse(tier, ctx, once), Ok(once));
            }
        }

        #[test]
        fn scope_list_roundtrip(req in any_scope()) {
            let json = serde_json::to_vec(&req).unwrap();
            prop_assert_eq!(serde_json::from_slice::<ScopeSet>(&json).unwrap(), req);
        }
    }
}
