int parse_record(BUF *b, int len) {
    if (len < 8)
        return -1;
    record_fetch(b, len, 12);
    return record_finish(b);
}
