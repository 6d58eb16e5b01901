# cython: language_level=3
"""Compiled filter core: default-deny rule table plus connection tracker.

Semantics are identical to ``sdperim.gateway.filtercore_py`` (the pure-Python
reference); see its docstring. This twin exists because the per-segment
verdict is the hot inner loop under flood load; the equivalence suite in
tests/test_filtering.py runs against both.
"""

import threading

FORWARD = 1
DROP = 0


cdef class FilterEngine:
    cdef dict _rules
    cdef dict _by_source
    cdef dict _by_owner
    cdef dict _conntrack
    cdef long _next_rule_id
    cdef object _lock
    cdef public long work_units
    cdef public long forwarded
    cdef public long dropped

    def __init__(self):
        self._lock = threading.Lock()
        self._rules = {}
        self._by_source = {}
        self._by_owner = {}
        self._conntrack = {}
        self._next_rule_id = 1
        self.work_units = 0
        self.forwarded = 0
        self.dropped = 0

    # -- rule table ------------------------------------------------------

    def install_rule(self, client_id, src_ip, service_id, public_port, double now, double ttl):
        cdef double expires_at = now + ttl
        cdef list rule
        with self._lock:
            owner = (client_id, service_id)
            rule_id = self._by_owner.get(owner)
            if rule_id is not None:
                rule = self._rules[rule_id]
                old_src = (rule[1], rule[3])
                if old_src != (src_ip, public_port):
                    self._by_source.pop(old_src, None)
                rule[1] = src_ip
                rule[3] = public_port
                rule[4] = expires_at
            else:
                rule_id = self._next_rule_id
                self._next_rule_id += 1
                self._rules[rule_id] = [client_id, src_ip, service_id, public_port, expires_at]
                self._by_owner[owner] = rule_id
            self._by_source[(src_ip, public_port)] = rule_id
            return rule_id, expires_at

    cdef bint _drop_rule(self, rule_id):
        rule = self._rules.pop(rule_id, None)
        if rule is None:
            return False
        self._by_owner.pop((rule[0], rule[2]), None)
        if self._by_source.get((rule[1], rule[3])) == rule_id:
            del self._by_source[(rule[1], rule[3])]
        return True

    def expire_rules(self, double now):
        cdef list doomed
        with self._lock:
            doomed = [rid for rid, rule in self._rules.items() if <double> rule[4] <= now]
            for rid in doomed:
                self._drop_rule(rid)
            return len(doomed)

    def remove_client_rules(self, client_id):
        cdef list doomed
        with self._lock:
            doomed = [rid for rid, rule in self._rules.items() if rule[0] == client_id]
            for rid in doomed:
                self._drop_rule(rid)
            return len(doomed)

    def sever_client(self, client_id):
        cdef list rules, flows
        with self._lock:
            rules = [rid for rid, rule in self._rules.items() if rule[0] == client_id]
            for rid in rules:
                self._drop_rule(rid)
            flows = [k for k, e in self._conntrack.items() if e[3] == client_id]
            for k in flows:
                del self._conntrack[k]
            return len(rules), flows

    def rule_count(self):
        with self._lock:
            return len(self._rules)

    def rule_expiry(self, client_id, service_id):
        with self._lock:
            rid = self._by_owner.get((client_id, service_id))
            if rid is None:
                return None
            return self._rules[rid][4]

    # -- verdicts --------------------------------------------------------

    def verdict_initiation(self, src_ip, long src_port, long dst_port, double now):
        cdef list rule
        with self._lock:
            self.work_units += 1
            rid = self._by_source.get((src_ip, dst_port))
            if rid is None:
                self.dropped += 1
                return DROP, "no-rule"
            rule = self._rules[rid]
            if <double> rule[4] <= now:
                self._drop_rule(rid)
                self.dropped += 1
                return DROP, "rule-expired"
            self._conntrack[(src_ip, src_port, dst_port)] = [now, now, rid, rule[0]]
            self.forwarded += 1
            return FORWARD, "rule-match"

    def verdict_segment(self, src_ip, long src_port, long dst_port, double now):
        cdef list entry
        with self._lock:
            self.work_units += 1
            entry = self._conntrack.get((src_ip, src_port, dst_port))
            if entry is None:
                self.dropped += 1
                return DROP, "no-conntrack"
            entry[1] = now
            self.forwarded += 1
            return FORWARD, "conntrack"

    # -- connection tracking ----------------------------------------------

    def touch(self, src_ip, long src_port, long dst_port, double now):
        cdef list entry
        with self._lock:
            entry = self._conntrack.get((src_ip, src_port, dst_port))
            if entry is None:
                return False
            entry[1] = now
            return True

    def conntrack_remove(self, src_ip, long src_port, long dst_port):
        with self._lock:
            return self._conntrack.pop((src_ip, src_port, dst_port), None) is not None

    def expire_idle(self, double now, double idle_timeout):
        cdef list doomed
        with self._lock:
            doomed = [k for k, e in self._conntrack.items() if now - <double> e[1] >= idle_timeout]
            for k in doomed:
                del self._conntrack[k]
            return len(doomed)

    def conntrack_count(self):
        with self._lock:
            return len(self._conntrack)

    def conntrack_client(self, src_ip, long src_port, long dst_port):
        with self._lock:
            entry = self._conntrack.get((src_ip, src_port, dst_port))
            return None if entry is None else entry[3]
