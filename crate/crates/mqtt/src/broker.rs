//! Broker state machine and the embeddable in-process broker.
//!
//! [`Broker`] holds sessions and subscriptions and decides who receives a
//! publish. It knows nothing about sockets or clocks: callers pass the current
//! time in nanoseconds, which lets the simulator drive it in virtual time and
//! the TCP server drive it from a monotonic clock.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

use crate::codec::{Packet, Publish, QoS, Subscription};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("client {0:?} is not connected")]
    NotConnected(String),
    #[error("broker unavailable")]
    Unavailable,
}

#[derive(Debug)]
struct Session {
    keepalive_s: u16,
    last_seen_ns: u64,
    subscriptions: Vec<Subscription>,
    next_packet_id: u16,
}

impl Session {
    fn allocate_packet_id(&mut self) -> u16 {
        let id = self.next_packet_id;
        self.next_packet_id = if id == u16::MAX { 1 } else { id + 1 };
        id
    }
}

/// Result of routing one inbound publish.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Dispatch {
    /// One entry per receiving client, in client-id order.
    pub deliveries: Vec<(String, Publish)>,
    /// PUBACK owed to the publisher for QoS 1 messages.
    pub ack: Option<Packet>,
}

#[derive(Debug, Default)]
pub struct Broker {
    sessions: BTreeMap<String, Session>,
    generated_ids: u64,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a clean session, replacing any existing session with the same id.
    ///
    /// An empty client id is replaced by a generated one; the id actually used
    /// is returned alongside the CONNACK.
    pub fn connect(&mut self, client_id: &str, keepalive_s: u16, now_ns: u64) -> (String, Packet) {
        let id = if client_id.is_empty() {
            self.generated_ids += 1;
            format!("auto-{}", self.generated_ids)
        } else {
            client_id.to_owned()
        };
        if self.sessions.contains_key(&id) {
            log::info!("client {id:?} reconnected; previous session discarded");
        }
        self.sessions.insert(
            id.clone(),
            Session {
                keepalive_s,
                last_seen_ns: now_ns,
                subscriptions: Vec::new(),
                next_packet_id: 1,
            },
        );
        (id, Packet::Connack { return_code: 0 })
    }

    pub fn is_connected(&self, client_id: &str) -> bool {
        self.sessions.contains_key(client_id)
    }

    pub fn client_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn disconnect(&mut self, client_id: &str) -> bool {
        self.sessions.remove(client_id).is_some()
    }

    /// Records activity from a client (any control packet resets keepalive).
    pub fn touch(&mut self, client_id: &str, now_ns: u64) -> Result<(), BrokerError> {
        let s = self.session_mut(client_id)?;
        s.last_seen_ns = s.last_seen_ns.max(now_ns);
        Ok(())
    }

    pub fn ping(&mut self, client_id: &str, now_ns: u64) -> Result<Packet, BrokerError> {
        self.touch(client_id, now_ns)?;
        Ok(Packet::Pingresp)
    }

    pub fn subscribe(
        &mut self,
        client_id: &str,
        packet_id: u16,
        filters: &[Subscription],
        now_ns: u64,
    ) -> Result<Packet, BrokerError> {
        self.touch(client_id, now_ns)?;
        let s = self.session_mut(client_id)?;
        let mut granted = Vec::with_capacity(filters.len());
        for sub in filters {
            // a repeated filter replaces the earlier subscription
            s.subscriptions
                .retain(|existing| existing.filter != sub.filter);
            s.subscriptions.push(sub.clone());
            granted.push(Some(sub.qos));
        }
        Ok(Packet::Suback { packet_id, granted })
    }

    /// Routes `publish` to every client with at least one matching filter.
    ///
    /// Each client receives at most one copy, at the lower of the message QoS
    /// and the highest QoS granted among its matching filters.
    pub fn dispatch(
        &mut self,
        from: &str,
        publish: &Publish,
        now_ns: u64,
    ) -> Result<Dispatch, BrokerError> {
        self.touch(from, now_ns)?;
        let mut deliveries = Vec::new();
        for (id, session) in self.sessions.iter_mut() {
            let granted = session
                .subscriptions
                .iter()
                .filter(|sub| sub.filter.matches(&publish.topic))
                .map(|sub| sub.qos)
                .max();
            let Some(granted) = granted else { continue };
            let qos = granted.min(publish.qos);
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(session.allocate_packet_id()),
            };
            deliveries.push((
                id.clone(),
                Publish {
                    topic: publish.topic.clone(),
                    payload: publish.payload.clone(),
                    qos,
                    packet_id,
                },
            ));
        }
        let ack = match (publish.qos, publish.packet_id) {
            (QoS::AtLeastOnce, Some(packet_id)) => Some(Packet::Puback { packet_id }),
            _ => None,
        };
        Ok(Dispatch { deliveries, ack })
    }

    /// Disconnects every client silent for at least 1.5 times its keepalive.
    ///
    /// A keepalive of zero disables the check for that client.
    pub fn expire(&mut self, now_ns: u64) -> Vec<String> {
        let expired: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, s)| {
                s.keepalive_s > 0
                    && now_ns.saturating_sub(s.last_seen_ns) >= s.keepalive_s as u64 * 1_500_000_000
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            log::info!("client {id:?} exceeded keepalive; disconnecting");
            self.sessions.remove(id);
        }
        expired
    }

    fn session_mut(&mut self, client_id: &str) -> Result<&mut Session, BrokerError> {
        self.sessions
            .get_mut(client_id)
            .ok_or_else(|| BrokerError::NotConnected(client_id.to_owned()))
    }
}

#[derive(Debug, Default)]
struct LocalState {
    broker: Broker,
    inboxes: BTreeMap<String, VecDeque<Publish>>,
    unavailable: bool,
    now_ns: u64,
}

/// An in-process broker with FIFO per-client inboxes.
///
/// Cloning yields another handle to the same broker. Time is whatever the
/// owner last passed to [`LocalBroker::set_time`].
#[derive(Debug, Clone, Default)]
pub struct LocalBroker {
    state: Arc<Mutex<LocalState>>,
}

impl LocalBroker {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, LocalState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_time(&self, now_ns: u64) {
        let mut st = self.lock();
        st.now_ns = now_ns;
        let expired = st.broker.expire(now_ns);
        for id in expired {
            st.inboxes.remove(&id);
        }
    }

    /// Simulates an outage: while unavailable every publish fails.
    pub fn set_available(&self, available: bool) {
        self.lock().unavailable = !available;
    }

    pub fn is_available(&self) -> bool {
        !self.lock().unavailable
    }

    pub fn connect(&self, client_id: &str, keepalive_s: u16) -> LocalClient {
        let mut st = self.lock();
        let now = st.now_ns;
        let (id, _) = st.broker.connect(client_id, keepalive_s, now);
        st.inboxes.insert(id.clone(), VecDeque::new());
        LocalClient {
            broker: self.clone(),
            client_id: id,
        }
    }

    pub fn client_count(&self) -> usize {
        self.lock().broker.client_count()
    }
}

/// A client session on a [`LocalBroker`].
#[derive(Debug, Clone)]
pub struct LocalClient {
    broker: LocalBroker,
    client_id: String,
}

impl LocalClient {
    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn subscribe(&self, filters: &[Subscription]) -> Result<Packet, BrokerError> {
        let mut st = self.broker.lock();
        let now = st.now_ns;
        st.broker.subscribe(&self.client_id, 1, filters, now)
    }

    /// Publishes and enqueues the resulting deliveries; returns the PUBACK for
    /// QoS 1 messages.
    pub fn publish(&self, publish: &Publish) -> Result<Option<Packet>, BrokerError> {
        let mut st = self.broker.lock();
        if st.unavailable {
            return Err(BrokerError::Unavailable);
        }
        let now = st.now_ns;
        let dispatch = st.broker.dispatch(&self.client_id, publish, now)?;
        for (id, msg) in dispatch.deliveries {
            if let Some(inbox) = st.inboxes.get_mut(&id) {
                inbox.push_back(msg);
            }
        }
        Ok(dispatch.ack)
    }

    pub fn ping(&self) -> Result<Packet, BrokerError> {
        let mut st = self.broker.lock();
        let now = st.now_ns;
        st.broker.ping(&self.client_id, now)
    }

    /// Takes every queued delivery in arrival order.
    pub fn drain(&self) -> Vec<Publish> {
        let mut st = self.broker.lock();
        st.inboxes
            .get_mut(&self.client_id)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn is_connected(&self) -> bool {
        self.broker.lock().broker.is_connected(&self.client_id)
    }

    pub fn disconnect(&self) {
        let mut st = self.broker.lock();
        st.broker.disconnect(&self.client_id);
        st.inboxes.remove(&self.client_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topic::TopicFilter;

    fn sub(f: &str, qos: QoS) -> Subscription {
        Subscription {
            filter: TopicFilter::parse(f).unwrap(),
            qos,
        }
    }

    #[test]
    fn fan_out_to_two_subscribers() {
        let mut b = Broker::new();
        b.connect("pub", 0, 0);
        b.connect("s1", 0, 0);
        b.connect("s2", 0, 0);
        b.subscribe("s1", 1, &[sub("energymon/#", QoS::AtMostOnce)], 0)
            .unwrap();
        b.subscribe("s2", 1, &[sub("energymon/#", QoS::AtMostOnce)], 0)
            .unwrap();
        let d = b
            .dispatch("pub", &Publish::qos0("energymon/n1/vdd", b"x".to_vec()), 0)
            .unwrap();
        let who: Vec<&str> = d.deliveries.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(who, vec!["s1", "s2"]);
        assert_eq!(d.ack, None);
    }

    #[test]
    fn overlapping_filters_deliver_once() {
        let mut b = Broker::new();
        b.connect("pub", 0, 0);
        b.connect("s", 0, 0);
        b.subscribe(
            "s",
            1,
            &[
                sub("energymon/#", QoS::AtMostOnce),
                sub("energymon/+/vdd", QoS::AtLeastOnce),
            ],
            0,
        )
        .unwrap();
        let msg = Publish {
            topic: "energymon/n1/vdd".into(),
            payload: vec![],
            qos: QoS::AtLeastOnce,
            packet_id: Some(9),
        };
        let d = b.dispatch("pub", &msg, 0).unwrap();
        assert_eq!(d.deliveries.len(), 1);
        assert_eq!(d.deliveries[0].1.qos, QoS::AtLeastOnce);
        assert_eq!(d.ack, Some(Packet::Puback { packet_id: 9 }));
    }

    #[test]
    fn no_matching_subscribers() {
        let mut b = Broker::new();
        b.connect("pub", 0, 0);
        b.connect("s", 0, 0);
        b.subscribe("s", 1, &[sub("other/#", QoS::AtMostOnce)], 0)
            .unwrap();
        let d = b
            .dispatch("pub", &Publish::qos0("energymon/n1/vdd", vec![]), 0)
            .unwrap();
        assert!(d.deliveries.is_empty());
    }

    #[test]
    fn keepalive_expiry_at_one_and_a_half() {
        let mut b = Broker::new();
        b.connect("c", 10, 0);
        b.connect("forever", 0, 0);
        assert!(b.expire(14_999_999_999).is_empty());
        assert_eq!(b.expire(15_000_000_000), vec!["c".to_string()]);
        assert!(!b.is_connected("c"));
        assert!(b.is_connected("forever"));
    }

    #[test]
    fn activity_resets_keepalive() {
        let mut b = Broker::new();
        b.connect("c", 10, 0);
        b.ping("c", 10_000_000_000).unwrap();
        assert!(b.expire(20_000_000_000).is_empty());
        assert_eq!(b.expire(25_000_000_000).len(), 1);
    }

    #[test]
    fn local_broker_outage() {
        let broker = LocalBroker::new();
        let hub = broker.connect("hub", 0);
        hub.subscribe(&[sub("energymon/#", QoS::AtMostOnce)])
            .unwrap();
        let node = broker.connect("n1", 0);
        broker.set_available(false);
        assert_eq!(
            node.publish(&Publish::qos0("energymon/n1/a", vec![1])),
            Err(BrokerError::Unavailable)
        );
        broker.set_available(true);
        node.publish(&Publish::qos0("energymon/n1/a", vec![2]))
            .unwrap();
        let got = hub.drain();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].payload, vec![2]);
    }
}
