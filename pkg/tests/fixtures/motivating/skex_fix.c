#include "ssl_local.h"

int process_key_exchange(SSL *s, int alg) {
    if (s->msg_type != 0x66)
        return -1;
    if (s->rec_len < 0x200)
        return -1;
    while (s->pending > 8)
        s->pending -= 8;
    if ((alg & 0xF) == 0xE) {
        if (s->sess_cert == NULL) {
            ssl3_send_alert(2, 40);
            goto err;
        }
        use_cert(s);
    }
    if ((alg & 0xF0) == 0xE0) {
        if (s->peer_tmp == NULL) {
            ssl3_send_alert(2, 40);
            goto err;
        }
        use_tmp(s);
    }
    return finish(s);
err:
    cleanup(s);
    return -1;
}
